"""Two-stage training on synthetic sequences.

Stage 1 trains everything except the score head on the tracking loss plus the
reconstruction term. Stage 2 freezes that network and fits the score head with
binary cross-entropy on (IoU >= 0.5) labels.

Every random draw is keyed by ``(seed, step, sample)`` so results do not
depend on anything but the seed and the config.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import RunConfig
from .data import SyntheticSequence, Triplet, augment, sample_negative, sample_triplet
from .heads import corners_to_boxes, iou
from .model import TrackerModel, save_checkpoint
from .optim import AdamW, NonFiniteGradientError, clip_grad_norm, layer_multipliers, lr_at, param_group

__all__ = ["TrainingDiverged", "TrainResult", "make_batch", "roi_for", "train_stage1", "train_stage2", "stage2_dataset"]

log = logging.getLogger(__name__)

_DATA, _MASK, _STAGE2 = 11, 13, 17


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, last_good: dict | None = None):
        super().__init__(msg)
        self.last_good = last_good


@dataclass
class TrainResult:
    model: TrackerModel
    log: list[dict] = field(default_factory=list)

    def write_log(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.log:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def roi_for(gt: np.ndarray, factor: float) -> np.ndarray:
    """Square of side ``factor * sqrt(w h)`` around the box, clipped to [0, 1]^2 (cx, cy, w, h)."""
    cx, cy, w, h = gt
    half = factor * math.sqrt(w * h) / 2
    x1, x2 = max(cx - half, 0.0), min(cx + half, 1.0)
    y1, y2 = max(cy - half, 0.0), min(cy + half, 1.0)
    return np.array([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1])


def _sample(cfg: RunConfig, rng: np.random.Generator, negative: bool = False) -> Triplet:
    seq = SyntheticSequence(cfg.sequence_config(), [cfg.seed, int(rng.integers(2**31))])
    t = (sample_negative if negative else sample_triplet)(seq, rng, cfg.crop_config())
    return augment(t, rng, (cfg.brightness_low, cfg.brightness_high), cfg.flip_prob)


def make_batch(cfg: RunConfig, step: int, seed: int | None = None, stream: int = _DATA) -> dict:
    seed = cfg.seed if seed is None else seed
    trips = []
    for i in range(cfg.batch_size):
        rng = np.random.default_rng([seed, stream, step, i])
        trips.append(_sample(cfg, rng))
    return stack_triplets(trips, cfg.template_factor)


def stack_triplets(trips: list[Triplet], template_factor: float) -> dict:
    gt = np.stack([t.gt.as_array() for t in trips])
    return {
        "template1": np.stack([t.template1 for t in trips]),
        "template2": np.stack([t.template2 for t in trips]),
        "search": np.stack([t.search for t in trips]),
        "gt": gt,
        "roi": np.stack([roi_for(g, template_factor) for g in gt]),
    }


def _epoch(step: int, steps: int, total_epochs: float) -> float:
    return min(total_epochs, total_epochs * step / max(steps, 1))


def _trainable(model: TrackerModel, recon: tuple[str, ...]) -> list[str]:
    names = [k for k in model.params if not k.startswith("score_head.")]
    if "t2t" not in recon and "s2s" not in recon:
        names = [k for k in names if not k.startswith("self_decoder.")]
    if "s2t" not in recon:
        names = [k for k in names if not k.startswith("cross_decoder.")]
    return names


def stage1_gradients(model: TrackerModel, batch: dict, mask_rng: np.random.Generator, recon=None):
    """Loss parts and raw gradients of one stage-1 step (no update)."""
    model.zero_grad()
    with ad.Tape() as tape:
        out = model.training_loss(batch, mask_rng, recon)
    ad.backward(out.loss, tape)
    grads = {k: p.grad for k, p in model.params.items() if p.grad is not None}
    return out, grads


def train_stage1(
    cfg: RunConfig,
    steps: int | None = None,
    seed: int | None = None,
    model: TrackerModel | None = None,
    out_dir=None,
    progress: bool = False,
) -> TrainResult:
    """Stage-1 optimization; returns the model and one log record per step."""
    steps = cfg.steps if steps is None else steps
    seed = cfg.seed if seed is None else seed
    model = TrackerModel(cfg, seed) if model is None else model
    recon = cfg.recon_list if cfg.lambda_dec != 0 else ()
    sched = cfg.schedule()
    mults = layer_multipliers(max(cfg.depth, 1), sched.layer_decay)
    names = _trainable(model, recon)
    lr_scale = {k: mults[param_group(k)] for k in names}
    opt = AdamW(weight_decay=cfg.weight_decay)
    records: list[dict] = []
    last_good = model.state_arrays()
    for step in range(steps):
        batch = make_batch(cfg, step, seed)
        mask_rng = np.random.default_rng([seed, _MASK, step])
        out, grads = stage1_gradients(model, batch, mask_rng, recon)
        if not math.isfinite(out.parts["total"]):
            model.load_arrays(last_good)
            raise TrainingDiverged(f"loss is not finite at step {step}", last_good)
        grads = {k: grads[k] for k in names if k in grads}
        try:
            gnorm = clip_grad_norm(grads, cfg.grad_clip)
            lr = lr_at(_epoch(step, steps, sched.total_epochs), sched)
            opt.step(model.params, grads, lr, lr_scale)
        except NonFiniteGradientError as exc:
            model.load_arrays(last_good)
            raise TrainingDiverged(f"step {step}: {exc}", last_good) from exc
        c = out.pred_corners
        rec = {
            "step": step,
            "lr": lr,
            "l1": out.parts["l1"],
            "giou_loss": out.parts["giou_loss"],
            **{k: out.parts[k] for k in ("recon_t2t", "recon_s2s", "recon_s2t")},
            "total": out.parts["total"],
            "grad_norm": gnorm,
            "inverted_corners": int(np.sum((c[:, 0] > c[:, 2]) | (c[:, 1] > c[:, 3]))),
        }
        records.append(rec)
        if progress and (step % 100 == 0 or step == steps - 1):
            log.info("stage1 step %d total %.4f l1 %.4f giou %.4f", step, rec["total"], rec["l1"], rec["giou_loss"])
        if step % 50 == 49:
            last_good = model.state_arrays()
    result = TrainResult(model, records)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, out_dir / "stage1.ckpt", {"stage": 1, "steps": steps, "seed": seed})
        result.write_log(out_dir / "stage1_metrics.jsonl")
    return result


# ---------------------------------------------------------------------------
# stage 2


def stage2_dataset(model: TrackerModel, cfg: RunConfig, n: int, seed: int, stream: int = _STAGE2):
    """Frozen class-token features and (IoU >= 0.5) labels for ``n`` samples.

    A ``negative_fraction`` of samples center the search region at a random
    frame location, so the target is often missing or off-center.
    """
    feats, labels = [], []
    B = cfg.batch_size
    for start in range(0, n, B):
        trips = []
        for i in range(start, min(n, start + B)):
            rng = np.random.default_rng([seed, stream, i])
            neg = bool(rng.uniform() < cfg.negative_fraction)
            trips.append(_sample(cfg, rng, negative=neg))
        seq = model.encode(
            [np.stack([t.template1 for t in trips]), np.stack([t.template2 for t in trips])],
            np.stack([t.search for t in trips]),
        )
        corners, _ = model.box_head.corners(seq.search)
        boxes = corners_to_boxes(corners.data)
        for t, b in zip(trips, boxes):
            ok = t.gt is not None and iou(b, t.gt) >= 0.5
            labels.append(1.0 if ok else 0.0)
        feats.append(seq.cls.data.reshape(len(trips), -1))
    return np.concatenate(feats), np.array(labels)


def train_stage2(model: TrackerModel, steps: int | None = None, seed: int | None = None, out_dir=None) -> TrainResult:
    """Fit only the score head; every other parameter stays bitwise unchanged."""
    cfg = model.cfg
    steps = cfg.stage2_steps if steps is None else steps
    seed = cfg.seed if seed is None else seed
    records: list[dict] = []
    if steps > 0:
        B = cfg.batch_size
        n = min(steps * B, cfg.stage2_samples)
        # features are frozen: encode each sample once, then cycle over them
        X, y = stage2_dataset(model, cfg, n, seed)
        names = [k for k in model.params if k.startswith("score_head.")]
        opt = AdamW(weight_decay=cfg.weight_decay)
        per_epoch = max(n // B, 1)
        order = np.arange(n)
        for step in range(steps):
            if step % per_epoch == 0:
                order = np.random.default_rng([seed, _STAGE2, step]).permutation(n)
            idx = order[(step % per_epoch) * B:(step % per_epoch + 1) * B]
            xb, yb = X[idx], y[idx]
            model.zero_grad()
            with ad.Tape() as tape:
                loss = ad.bce_with_logits(model.score_head.logit(xb), yb)
            ad.backward(loss, tape)
            grads = {k: model.params[k].grad for k in names}
            clip_grad_norm(grads, cfg.grad_clip)
            lr = cfg.stage2_lr * 0.5 * (1 + math.cos(math.pi * step / steps))
            opt.step(model.params, grads, lr)
            records.append({"step": step, "lr": lr, "bce": loss.item(), "positive_rate": float(yb.mean())})
        model.zero_grad()
    result = TrainResult(model, records)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, out_dir / "stage2.ckpt", {"stage": 2, "steps": steps, "seed": seed})
        result.write_log(out_dir / "stage2_metrics.jsonl")
    return result
