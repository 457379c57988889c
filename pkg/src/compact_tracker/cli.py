"""Command-line entry point.

Exit codes: 0 success, 1 a verification failed, 2 usage error (bad flags,
missing inputs, invalid config).
"""
from __future__ import annotations

import json
import logging
import sys
import time
from pathlib import Path

import click
import numpy as np

from .config import PRESET_NAMES, RunConfig, load_preset

log = logging.getLogger("compact_tracker")


def _resolve(preset: str | None, config_path: str | None, seed: int | None) -> RunConfig:
    d = {}
    if config_path:
        try:
            d = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise click.UsageError(f"cannot read config {config_path}: {exc}")
        if not isinstance(d, dict):
            raise click.UsageError(f"{config_path}: expected a JSON object")
    name = preset or d.get("preset") or "desk"
    d["preset"] = name
    if seed is not None:
        d["seed"] = seed
    try:
        return load_preset(name).override(**d)
    except (KeyError, ValueError, TypeError) as exc:
        raise click.UsageError(f"invalid config: {exc}")


class _Ctx:
    def __init__(self, cfg: RunConfig, out_dir: Path):
        self.cfg = cfg
        self.out_dir = out_dir

    def out(self, cfg: RunConfig | None = None) -> Path:
        """Create the output directory and echo the resolved config into it."""
        self.out_dir.mkdir(parents=True, exist_ok=True)
        (cfg or self.cfg).save(self.out_dir / "config.json")
        return self.out_dir


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_model(path):
    from .model import load_checkpoint

    if not Path(path).is_file():
        raise click.UsageError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except (ValueError, KeyError) as exc:
        raise click.UsageError(f"{path}: {exc}")


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="JSON file of config overrides.")
@click.option("--seed", type=int, default=None, help="Overrides the config seed.")
@click.option("--out-dir", type=click.Path(file_okay=False), default="out", show_default=True)
@click.option("--preset", type=click.Choice(PRESET_NAMES), default=None, help="Base preset (default: desk).")
@click.option("-v", "--verbose", is_flag=True)
@click.pass_context
def main(ctx, config_path, seed, out_dir, preset, verbose):
    """Compact transformer tracker: verification, training, tracking, ablations."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(message)s")
    ctx.obj = _Ctx(_resolve(preset, config_path, seed), Path(out_dir))


# ---------------------------------------------------------------------------
# verification


@main.command("verify-attention")
@click.option("--trials", type=click.IntRange(min=1), default=100, show_default=True)
@click.option("--tol", type=float, default=1e-9, show_default=True)
@click.option("--grad/--no-grad", default=True, show_default=True, help="Also run finite-difference checks of every op.")
@click.option("--full-graph", is_flag=True, help="Add finite-difference checks of the whole stage-1 loss.")
@click.pass_obj
def verify_attention(obj: _Ctx, trials, tol, grad, full_graph):
    """Check the attention-variant identities (and gradients); exit 1 on any failure."""
    from .attention import verify_equivalences

    t0 = time.perf_counter()
    rep = verify_equivalences(trials=trials, seed=obj.cfg.seed, tol=tol)
    click.echo(rep.to_text())
    report = {"attention": rep.to_dict()}
    ok = rep.passed
    if grad:
        from .gradcheck import gradient_suite

        res = gradient_suite(seed=obj.cfg.seed, stage1=full_graph)
        bad = [r for r in res if not r.passed]
        worst = max(r.max_rel_error for r in res)
        click.echo(f"gradient checks: {len(res)} cases, max relative error {worst:.3e}, {len(bad)} failed")
        for r in bad:
            click.echo(f"  FAIL  {r.name} shape={r.shape} rel_err={r.max_rel_error:.3e}")
        report["gradients"] = {"cases": [r.to_dict() for r in res], "passed": not bad}
        ok = ok and not bad
    report["passed"] = ok
    report["seconds"] = time.perf_counter() - t0
    _write_json(obj.out() / "verify_attention.json", report)
    sys.exit(0 if ok else 1)


# ---------------------------------------------------------------------------
# training


@main.command()
@click.option("--steps", type=click.IntRange(min=0), default=None, help="Stage-1 steps (default from config).")
@click.option("--stage2-steps", type=click.IntRange(min=0), default=None)
@click.pass_obj
def train(obj: _Ctx, steps, stage2_steps):
    """Two-stage training; writes checkpoints and per-step JSONL metrics."""
    from .model import save_checkpoint
    from .training import TrainingDiverged, train_stage1, train_stage2

    kw = {}
    if steps is not None:
        kw["steps"] = steps
    if stage2_steps is not None:
        kw["stage2_steps"] = stage2_steps
    cfg = obj.cfg.override(**kw)
    out = obj.out(cfg)
    try:
        r1 = train_stage1(cfg, out_dir=out, progress=True)
    except TrainingDiverged as exc:
        click.echo(f"training diverged: {exc}", err=True)
        sys.exit(1)
    r2 = train_stage2(r1.model, out_dir=out)
    save_checkpoint(r1.model, out / "model.ckpt", {"stage": 2, "steps": cfg.steps, "stage2_steps": cfg.stage2_steps, "seed": cfg.seed})
    summary = {
        "checkpoint": "model.ckpt",  # relative to --out-dir
        "stage1_steps": len(r1.log),
        "stage2_steps": len(r2.log),
        "final_total": r1.log[-1]["total"] if r1.log else None,
    }
    _write_json(out / "train_summary.json", summary)
    click.echo(json.dumps(summary, sort_keys=True))


# ---------------------------------------------------------------------------
# sequences, tracking and evaluation


def read_boxes(path) -> np.ndarray:
    """One ``x y w h`` line per frame (commas also accepted)."""
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            rows.append([float(v) for v in line.replace(",", " ").split()])
    a = np.array(rows, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 4:
        raise ValueError(f"{path}: expected lines of 4 numbers")
    return a


def write_boxes(path, boxes) -> None:
    Path(path).write_text("".join(" ".join(repr(float(v)) for v in b) + "\n" for b in boxes))


def _frame_files(frames_dir) -> list[Path]:
    d = Path(frames_dir)
    if not d.is_dir():
        raise click.UsageError(f"frames directory not found: {frames_dir}")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in (".ppm", ".pgm"))
    if len(files) < 2:
        raise click.UsageError(f"{frames_dir}: need at least 2 numbered PPM frames")
    return files


@main.command("make-sequence")
@click.option("--length", type=click.IntRange(min=3), default=None, help="Frames (default: eval_length).")
@click.option("--index", type=int, default=0, show_default=True, help="Held-out sequence index.")
@click.pass_obj
def make_sequence(obj: _Ctx, length, index):
    """Write a held-out synthetic sequence as numbered PPM frames plus groundtruth.txt."""
    from .data import SyntheticSequence
    from .imaging import write_ppm
    from .tracker import _HELD_OUT

    cfg = obj.cfg
    seq = SyntheticSequence(cfg.sequence_config(length or cfg.eval_length), [cfg.seed, _HELD_OUT, index])
    out = obj.out()
    fd = out / "frames"
    fd.mkdir(exist_ok=True)
    for i in range(len(seq)):
        write_ppm(fd / f"{i:05d}.ppm", seq.frame(i))
    write_boxes(out / "groundtruth.txt", seq.boxes)
    click.echo(f"wrote {len(seq)} frames to {fd}")


@main.command()
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--frames", "frames_dir", required=True, type=click.Path())
@click.option("--gt", "gt_path", type=click.Path(), help="Ground-truth box file; line 1 initializes the tracker.")
@click.option("--init", "init_box", type=str, help='Initial box "x y w h" when no ground truth is given.')
@click.option("--update-mode", type=click.Choice(["none", "interval", "score"]), default=None)
@click.pass_obj
def track(obj: _Ctx, checkpoint, frames_dir, gt_path, init_box, update_mode):
    """Track through numbered frames; writes results.txt, scores.txt and template_updates.jsonl."""
    from .imaging import read_ppm
    from .tracker import evaluate_sequence, track_sequence

    model, _ = _load_model(checkpoint)
    files = _frame_files(frames_dir)
    gt = None
    try:
        if gt_path:
            gt = read_boxes(gt_path)
            box0 = gt[0]
        elif init_box:
            box0 = np.array([float(v) for v in init_box.replace(",", " ").split()])
            if box0.shape != (4,):
                raise ValueError("--init needs 4 numbers")
        else:
            raise click.UsageError("give --gt or --init")
    except (OSError, ValueError) as exc:
        raise click.UsageError(str(exc))
    tracking = {k: getattr(obj.cfg, k) for k in ("score_threshold", "update_interval", "update_mode", "precision_fraction")}
    if update_mode:
        tracking["update_mode"] = update_mode
    cfg = model.cfg.override(**tracking, seed=obj.cfg.seed)
    out = obj.out(cfg)
    # frames are read one at a time as the tracker asks for them
    frames = (read_ppm(p) for p in files)
    boxes, scores, updates = [box0], [1.0], []
    state = None
    for state, res in track_sequence(model, frames, box0, cfg):
        boxes.append(res.box)
        scores.append(res.score)
    if state is not None:
        updates = list(state.update_log)
    write_boxes(out / "results.txt", boxes)
    (out / "scores.txt").write_text("".join(f"{s!r}\n" for s in scores))
    with open(out / "template_updates.jsonl", "w") as fh:
        for ev in updates:
            fh.write(json.dumps(ev, sort_keys=True) + "\n")
    summary = {"frames": len(boxes), "template_updates": len(updates)}
    if gt is not None and len(gt) == len(files):
        m = evaluate_sequence(model, [read_ppm(p) for p in files], gt, cfg)
        summary.update(m.summary())
    _write_json(out / "metrics.json", summary)
    click.echo(json.dumps(summary, sort_keys=True))


def box_metrics(results: np.ndarray, gt: np.ndarray, diag: float, fraction: float) -> dict:
    """AUC, precision and mean IoU of pixel boxes; row 0 (the initialization) is skipped."""
    from .heads import iou
    from .tracker import precision_rate, success_auc

    def xyxy(b):
        return np.array([b[0], b[1], b[0] + b[2], b[1] + b[3]])

    r, g = results[1:], gt[1:]
    ious = np.array([iou(xyxy(a), xyxy(b)) for a, b in zip(r, g)])
    err = np.linalg.norm((r[:, :2] + r[:, 2:] / 2) - (g[:, :2] + g[:, 2:] / 2), axis=1)
    thr = fraction * diag
    return {
        "auc": success_auc(ious),
        "precision": precision_rate(err, thr),
        "precision_threshold_px": thr,
        "mean_iou": float(ious.mean()),
        "frames": int(len(ious)),
    }


@main.command("eval")
@click.option("--results", "results_path", required=True, type=click.Path())
@click.option("--gt", "gt_path", required=True, type=click.Path())
@click.option("--frame-size", nargs=2, type=int, default=None, help="Frame width and height (default: config frame_size).")
@click.pass_obj
def eval_cmd(obj: _Ctx, results_path, gt_path, frame_size):
    """Score a box file against ground truth (AUC, precision, mean IoU) into metrics.json."""
    try:
        res, gt = read_boxes(results_path), read_boxes(gt_path)
    except (OSError, ValueError) as exc:
        raise click.UsageError(str(exc))
    if len(res) != len(gt) or len(gt) < 2:
        raise click.UsageError(f"results ({len(res)}) and ground truth ({len(gt)}) need the same length >= 2")
    W, H = frame_size or (obj.cfg.frame_size, obj.cfg.frame_size)
    metrics = box_metrics(res, gt, float(np.hypot(W, H)), obj.cfg.precision_fraction)
    _write_json(obj.out() / "metrics.json", metrics)
    click.echo(json.dumps(metrics, sort_keys=True))


# ---------------------------------------------------------------------------
# ablations


def _ablation(obj: _Ctx, steps, stage2, fn, name, note):
    from .ablation import to_csv

    cfg = obj.cfg if steps is None else obj.cfg.override(steps=steps)
    out = obj.out(cfg)
    rows = fn(cfg, stage2=stage2)
    text = to_csv(rows)
    (out / f"{name}.csv").write_text(text)
    click.echo(text, nl=False)
    click.echo(f"# note: {note}")
    return rows


@main.command("ablate-streams")
@click.option("--steps", type=click.IntRange(min=0), default=None)
@click.option("--stage2/--no-stage2", default=True, show_default=True, help="Train the score head before evaluating.")
@click.pass_obj
def ablate_streams_cmd(obj: _Ctx, steps, stage2):
    """Train and evaluate the five attention-stream configurations; writes ablate_streams.csv."""
    from .ablation import STREAM_NOTE, ablate_streams

    _ablation(obj, steps, stage2, ablate_streams, "ablate_streams", STREAM_NOTE)


@main.command("ablate-recon")
@click.option("--steps", type=click.IntRange(min=0), default=None)
@click.option("--stage2/--no-stage2", default=True, show_default=True)
@click.option("--mask-ratio-sweep", is_flag=True, help="Also sweep mask ratio 0.25/0.5/0.75/0.9.")
@click.pass_obj
def ablate_recon_cmd(obj: _Ctx, steps, stage2, mask_ratio_sweep):
    """Train and evaluate the six reconstruction-stream combinations; writes ablate_recon.csv."""
    from .ablation import MASK_NOTE, RECON_NOTE, ablate_mask_ratio, ablate_recon

    _ablation(obj, steps, stage2, ablate_recon, "ablate_recon", RECON_NOTE)
    if mask_ratio_sweep:
        _ablation(obj, steps, stage2, ablate_mask_ratio, "mask_ratio", MASK_NOTE)


# ---------------------------------------------------------------------------
# visualization


def _demo_triplet(cfg: RunConfig, triplet_dir):
    """Templates and search image from ``triplet_dir`` or a seeded synthetic sample."""
    from .imaging import read_ppm

    if triplet_dir:
        d = Path(triplet_dir)
        try:
            return [read_ppm(d / f"{n}.ppm") for n in ("template1", "template2", "search")]
        except OSError as exc:
            raise click.UsageError(str(exc))
    from .data import SyntheticSequence, sample_triplet

    rng = np.random.default_rng([cfg.seed, 23])
    seq = SyntheticSequence(cfg.sequence_config(), [cfg.seed, 23])
    t = sample_triplet(seq, rng, cfg.crop_config())
    return [t.template1, t.template2, t.search]


def normalize_block(a: np.ndarray) -> np.ndarray:
    """Min-max to 0..255; a constant block maps to mid-gray."""
    lo, hi = float(a.min()), float(a.max())
    if hi - lo <= 0.0:
        return np.full(a.shape, 128.0)
    return (a - lo) / (hi - lo) * 255.0


@main.command("render-attn")
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--layer", type=int, default=None, help="Block index (0-based); default renders all.")
@click.option("--triplet", "triplet_dir", type=click.Path(), help="Directory with template1/template2/search .ppm.")
@click.pass_obj
def render_attn(obj: _Ctx, checkpoint, layer, triplet_dir):
    """Head-averaged S-to-S, T-to-T and S-to-T attention blocks as PGM files."""
    from .imaging import write_pgm

    model, _ = _load_model(checkpoint)
    depth = model.encoder.cfg.depth
    if layer is not None and not 0 <= layer < depth:
        raise click.UsageError(f"--layer must be in [0, {depth - 1}]")
    t1, t2, s = _demo_triplet(model.cfg, triplet_dir)
    seq = model.encode([t1, t2], s, keep_maps=True)
    Nt, Ns = seq.template_len, seq.search_len
    tpl = slice(1, 1 + 2 * Nt)
    srch = slice(1 + 2 * Nt, 1 + 2 * Nt + Ns)
    out = obj.out(model.cfg)
    written = []
    for k in range(depth) if layer is None else [layer]:
        amap = seq.attention_maps[k].mean(axis=-3)  # average heads
        blocks = {"s2s": amap[srch, srch], "t2t": amap[tpl, tpl], "s2t": amap[srch, tpl]}
        for name, b in blocks.items():
            p = out / f"layer{k}_{name}.pgm"
            write_pgm(p, normalize_block(b))
            written.append(p.name)
    click.echo(f"wrote {len(written)} files: {', '.join(written)}")


@main.command("recon-demo")
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--mask-ratio", type=click.FloatRange(0.0, 1.0), default=None)
@click.option("--triplet", "triplet_dir", type=click.Path())
@click.pass_obj
def recon_demo(obj: _Ctx, checkpoint, mask_ratio, triplet_dir):
    """Masked input, reconstruction and composite for each stream as PPM files."""
    from .encoder import patchify, unpatchify
    from .imaging import write_ppm
    from .masked_modeling import prroi_crop, sample_mask
    from .training import roi_for

    model, _ = _load_model(checkpoint)
    cfg = model.cfg
    ratio = cfg.mask_ratio if mask_ratio is None else mask_ratio
    ec = model.encoder.cfg
    t1, t2, s = _demo_triplet(cfg, triplet_dir)
    seq = model.encode([t1, t2], s)
    rng = np.random.default_rng([obj.cfg.seed, 29])
    # the s2t crop is centred on the predicted box
    from .heads import corners_to_boxes

    corners, _ = model.box_head.corners(seq.search)
    roi = roi_for(corners_to_boxes(corners.data)[0].as_array(), cfg.template_factor)
    runs = {
        "t2t": (model.self_decoder, seq.template(0), "template", t1, ec.template_tokens),
        "s2s": (model.self_decoder, seq.search, "search", s, ec.search_tokens),
        "s2t": (model.cross_decoder, prroi_crop(seq.search, roi, ec.template_grid), "template", t1, ec.template_tokens),
    }
    out = obj.out(cfg)
    p = ec.patch_size
    for name, (dec, tokens, grid, target, L) in runs.items():
        plan = sample_mask(L, ratio, rng)
        pred = dec(tokens, plan, grid, name).pred.data
        side = target.shape[0]
        patches = patchify(target, p)
        m = plan.indicator()[:, None].astype(bool)
        masked = np.where(m, 0.5, patches)
        composite = np.where(m, np.clip(pred, 0, 1), patches)
        write_ppm(out / f"{name}_target.ppm", target)
        write_ppm(out / f"{name}_masked.ppm", unpatchify(masked, p, side, side))
        write_ppm(out / f"{name}_recon.ppm", np.clip(unpatchify(pred, p, side, side), 0, 1))
        write_ppm(out / f"{name}_composite.ppm", unpatchify(composite, p, side, side))
    click.echo(f"wrote reconstructions for {', '.join(runs)} to {out}")


# ---------------------------------------------------------------------------
# model statistics

PAPER_B_NOTE = (
    "published ViT-B tracker: 93.8 M parameters; that figure includes a convolutional "
    "corner head which this build replaces with a perceptron head"
)


@main.command("model-stats")
@click.pass_obj
def model_stats(obj: _Ctx):
    """Exact parameter count per module and in total."""
    from .model import TrackerModel

    cfg = obj.cfg
    counts = TrackerModel(cfg, cfg.seed).param_counts()
    # decoders exist only for training
    inference = counts["total"] - counts.get("self_decoder", 0) - counts.get("cross_decoder", 0)
    stats = {
        "preset": cfg.preset,
        "params": counts,
        "total_millions": counts["total"] / 1e6,
        "inference_params": inference,
    }
    if cfg.preset == "paper-B":
        stats["note"] = PAPER_B_NOTE
    _write_json(obj.out() / "model_stats.json", stats)
    for k, v in counts.items():
        click.echo(f"{k:<16s}{v:>14,d}")
    click.echo(f"{'inference':<16s}{inference:>14,d}")
    if "note" in stats:
        click.echo(f"# note: {stats['note']}")


if __name__ == "__main__":
    main()
