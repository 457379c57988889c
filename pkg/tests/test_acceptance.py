"""Acceptance criteria 1-10, each printed as one PASS/FAIL line in the summary.

Criteria 7 and 9 share one desk-scale training run (about 5 minutes on one
core); criterion 7(c) adds a second run with streams {23}.
"""
import json
import time
from collections import defaultdict

import numpy as np
import pytest
from acceptance_report import criterion
from click.testing import CliRunner
from oracles import mc_giou, quadrature_roi

from compact_tracker.ablation import RECON_ROWS, ablate_recon
from compact_tracker.attention import (
    AttentionWeights,
    SegmentedInput,
    StreamMask,
    amix_attention,
    cross_attention,
    stream_masked_attention,
    verify_equivalences,
)
from compact_tracker.autodiff import Tensor
from compact_tracker.cli import main
from compact_tracker.config import RunConfig
from compact_tracker.data import SyntheticSequence, SyntheticSequenceConfig, sample_triplet
from compact_tracker.gradcheck import gradient_suite
from compact_tracker.heads import giou, iou
from compact_tracker.masked_modeling import MaskPlan, ReconstructionOutput, decoder_loss, prroi_crop, sample_mask
from compact_tracker.model import TrackerModel
from compact_tracker.tracker import crop_search_region, evaluate_suite, init_tracker, track_frame, track_sequence
from compact_tracker.training import make_batch, stage1_gradients, stage2_dataset, train_stage1, train_stage2

DESK = RunConfig()
TINY = {"d_model": 16, "dec_dim": 16, "box_hidden": 16, "score_hidden": 16, "batch_size": 2, "stage2_steps": 2}


# -- 1, 2: attention --------------------------------------------------------------


def test_c01_pself_equals_mix():
    with criterion(1, "PSelf-Attn == Mix-Attn (outputs and gradients) <= 1e-9") as d:
        t = time.perf_counter()
        rep = verify_equivalences(trials=100, seed=0, tol=1e-9, L_range=(1, 16), dims=(4, 8, 16), heads=(1, 2, 4))
        elapsed = time.perf_counter() - t
        dev = max(rep.max_deviation["pself_eq_mix"], rep.max_deviation["pself_eq_mix_grad"])
        d["text"] = f"max dev {dev:.1e}, {elapsed:.2f} s"
        assert dev <= 1e-9
        assert elapsed < 5.0


def test_c02_subset_constructions():
    with criterion(2, "AMix == mask{134}, Cross == mask{23} <= 1e-12; blocked blocks exactly 0") as d:
        rep = verify_equivalences(trials=100, seed=1, tol=1e-12)
        worst = max(rep.max_deviation["amix_eq_mask134"], rep.max_deviation["cross_eq_mask23"])
        rng = np.random.default_rng(2)
        for _ in range(100):
            L_z, L_s = rng.integers(1, 17, size=2)
            dim = int(rng.choice([4, 8, 16]))
            H = int(rng.choice([1, 2, 4]))
            w = AttentionWeights.random(dim, H, dim // H, rng)
            x = SegmentedInput(rng.normal(size=(L_z, dim)), rng.normal(size=(L_s, dim)))
            out, amap = stream_masked_attention(x, w, StreamMask.parse("134"), return_map=True)
            worst = max(worst, np.max(np.abs(out.data - amix_attention(x, w).data)))
            assert np.all(amap.data[:, :L_z, L_z:] == 0.0)
            out, amap = stream_masked_attention(x, w, StreamMask.parse("23"), return_map=True)
            worst = max(worst, np.max(np.abs(out.data - cross_attention(x, w).data)))
            assert np.all(amap.data[:, :L_z, :L_z] == 0.0) and np.all(amap.data[:, L_z:, L_z:] == 0.0)
        d["text"] = f"max dev {worst:.1e}"
        assert worst <= 1e-12


# -- 3: gradients -----------------------------------------------------------------


def test_c03_gradient_correctness():
    with criterion(3, "every op and the stage-1 loss pass finite differences at 1e-4 on >= 3 shapes") as d:
        results = gradient_suite(seed=0, tol=1e-4, h=1e-5, stage1=True)
        shapes = defaultdict(set)
        for r in results:
            shapes[r.name.split("[")[0]].add(tuple(r.shape))
        worst = max(r.max_rel_error for r in results)
        d["text"] = f"{len(shapes)} ops, {len(results)} cases, worst rel err {worst:.1e}"
        assert all(r.passed for r in results), [r.name for r in results if not r.passed]
        assert all(len(s) >= 3 for s in shapes.values()), dict(shapes)
        assert {"stage1_loss", "prroi_crop", "giou_loss", "stream_masked_attention"} <= set(shapes)


# -- 4: masking -------------------------------------------------------------------


def test_c04_masking_accounting():
    with criterion(4, "mask counts exact, frequency 0.75 +/- 0.02, L_dec ignores unmasked predictions") as d:
        for L in (4, 16, 64, 400):
            plan = sample_mask(L, 0.75, np.random.default_rng(L))
            assert len(set(plan.masked)) == round(0.75 * L)
        rng = np.random.default_rng(0)
        counts = np.zeros(64)
        for _ in range(10_000):
            counts += sample_mask(64, 0.75, rng).indicator()
        dev = np.max(np.abs(counts / 10_000 - 0.75))
        d["text"] = f"max freq deviation {dev:.4f}"
        assert dev <= 0.02

        rng = np.random.default_rng(1)
        L, dim = 16, 12
        plan = sample_mask(L, 0.75, rng)
        unmasked = [i for i in range(L) if i not in set(plan.masked)]
        for stream in ("t2t", "s2s", "s2t"):
            tgt, pred = rng.uniform(size=(L, dim)), rng.uniform(size=(L, dim))
            base = decoder_loss({stream: ReconstructionOutput(Tensor(pred), stream, plan)}, {stream: tgt}, [stream])[0]
            pred2 = pred.copy()
            pred2[unmasked] += rng.normal(size=(len(unmasked), dim)) * 1e3
            pert = decoder_loss({stream: ReconstructionOutput(Tensor(pred2), stream, plan)}, {stream: tgt}, [stream])[0]
            assert pert.item() == base.item()
        assert isinstance(plan, MaskPlan)


# -- 5: GIoU ----------------------------------------------------------------------


def test_c05_giou():
    with criterion(5, "GIoU identity, hand case -5/63, Monte-Carlo oracle within 2e-3") as d:
        a = np.array([0.0, 0.0, 2.0, 2.0])
        assert giou(a, a) == 1.0
        assert abs(giou(a, np.array([1.0, 1.0, 3.0, 3.0])) + 5 / 63) <= 1e-12
        rng = np.random.default_rng(5)
        worst = 0.0
        for k in range(20):
            lo = rng.uniform(0, 1, size=(2, 2))
            hi = lo + rng.uniform(0.1, 1.0, size=(2, 2))
            p, q = np.r_[lo[0], hi[0]], np.r_[lo[1], hi[1]]
            worst = max(worst, abs(giou(p, q) - mc_giou(p, q, n=1_000_000, seed=k)))
        d["text"] = f"worst MC gap {worst:.1e}"
        assert worst <= 2e-3


# -- 6: PrRoI pooling -------------------------------------------------------------


def test_c06_prroi_pooling():
    with criterion(6, "PrRoI constant field exact, dense quadrature within 1e-6, gradients checked") as d:
        rng = np.random.default_rng(6)
        for _ in range(20):
            G = int(rng.integers(1, 9))
            c = rng.normal(size=3)
            box = (*rng.uniform(-0.2, 1.2, size=2), *rng.uniform(0.05, 1.5, size=2))
            pooled = prroi_crop(np.tile(c, (G * G, 1)), box, int(rng.integers(1, 4))).data
            assert np.max(np.abs(pooled - c)) <= 1e-13
        worst = 0.0
        for _ in range(20):
            G = int(rng.integers(2, 7))
            tokens = rng.normal(size=(G, G, 2))
            box = (*rng.uniform(0.1, 0.9, size=2), *rng.uniform(0.1, 0.9, size=2))
            out = int(rng.integers(1, 3))
            ref = quadrature_roi(tokens, box, out)
            worst = max(worst, np.max(np.abs(prroi_crop(tokens, box, out).data - ref)))
        grads = [r for r in gradient_suite(seed=6, stage1=False) if r.name.startswith("prroi_crop")]
        d["text"] = f"quadrature gap {worst:.1e}, {len(grads)} gradient cases"
        assert worst <= 1e-6
        assert len(grads) >= 3 and all(r.passed for r in grads)


# -- 7: desk-scale training -------------------------------------------------------


def _total(log):
    return np.array([r["total"] for r in log])


@pytest.fixture(scope="session")
def desk_run():
    t = time.perf_counter()
    r = train_stage1(DESK.override(streams="1234"))
    elapsed = time.perf_counter() - t
    return r, elapsed, evaluate_suite(r.model, DESK)


@pytest.fixture(scope="session")
def cross_run():
    cfg = DESK.override(streams="23")
    t = time.perf_counter()
    r = train_stage1(cfg)
    elapsed = time.perf_counter() - t
    return r, elapsed, evaluate_suite(r.model, cfg)


@pytest.fixture(scope="session")
def scored_model(desk_run):
    model = TrackerModel(DESK)
    model.load_arrays(desk_run[0].model.state_arrays())
    train_stage2(model)
    return model


def test_c07_desk_training(desk_run, cross_run):
    with criterion(7, "desk training: loss <= 50% of start, mean IoU >= 0.5, {23} below {1234}") as d:
        r, t_full, m_full = desk_run
        rc, t_cross, m_cross = cross_run
        tot = _total(r.log)
        assert len(tot) == DESK.steps == 2000
        start = tot[:50].mean()
        ratio_last = tot[-1] / start
        ratio_tail = tot[-50:].mean() / start
        d["text"] = (
            f"loss ratio {ratio_tail:.3f} (last step {ratio_last:.3f}), mean IoU {m_full['mean_iou']:.3f} "
            f"vs {{23}} {m_cross['mean_iou']:.3f}, {t_full:.0f}+{t_cross:.0f} s"
        )
        assert ratio_tail <= 0.5 and ratio_last <= 0.5
        assert m_full["mean_iou"] >= 0.5
        assert m_cross["mean_iou"] < m_full["mean_iou"]
        assert t_full < 900 and t_cross < 900


def test_desk_static_scene(desk_run):
    # frame identical to the init frame, averaged over five held-out scenes
    model = desk_run[0].model
    ious = []
    for i in range(5):
        seq = SyntheticSequence(DESK.sequence_config(3), [DESK.seed, 999983, 100 + i])
        f = seq.frame(0)
        _, res = track_frame(init_tracker(f, seq.boxes[0], DESK), f, model)
        x, y, w, h = res.box
        gx, gy, gw, gh = seq.boxes[0]
        ious.append(iou(np.array([x, y, x + w, y + h]), np.array([gx, gy, gx + gw, gy + gh])))
    assert np.mean(ious) >= 0.8, ious


def test_desk_score_gap(scored_model):
    X, y = stage2_dataset(scored_model, DESK, 400, seed=12345)
    s = scored_model.score_head(X)
    assert 0 < y.sum() < len(y)
    assert s[y == 1].mean() - s[y == 0].mean() >= 0.2


# -- 8: reconstruction-stream plumbing --------------------------------------------


def _group(name):
    parts = name.split(".")
    return ".".join(parts[:3]) if name.startswith("encoder.blocks.") else ".".join(parts[:2])


def test_c08_recon_plumbing():
    with criterion(8, "6 recon rows finite; 'none' grads == lambda_dec=0; L_dec reaches every encoder group") as d:
        rows = ablate_recon(DESK.override(steps=20, stage2_steps=20, eval_sequences=2, eval_length=10))
        assert [r.label for r in rows] == [label for label, _, _ in RECON_ROWS]
        assert all(np.isfinite([r.final_loss, r.auc, r.mean_iou]).all() for r in rows)

        batch = make_batch(DESK, 0)
        _, none = stage1_gradients(TrackerModel(DESK), batch, np.random.default_rng(0), ())
        _, zero = stage1_gradients(TrackerModel(DESK.override(lambda_dec=0.0)), batch, np.random.default_rng(0), None)
        shared = [k for k in none if not k.startswith(("self_decoder.", "cross_decoder."))]
        assert shared and all(np.array_equal(none[k], zero[k]) for k in shared)

        _, full = stage1_gradients(TrackerModel(DESK), batch, np.random.default_rng(0), ("t2t", "s2s", "s2t"))
        touched = defaultdict(bool)
        for k in none:
            if k.startswith("encoder."):
                diff = full[k] - none[k]
                assert np.all(np.isfinite(diff))
                touched[_group(k)] |= bool(np.any(diff != 0))
        d["text"] = f"{len(rows)} rows, {sum(touched.values())}/{len(touched)} encoder groups reached"
        assert all(touched.values()), dict(touched)


# -- 9: tracker runtime -----------------------------------------------------------


def test_c09_tracker_runtime(scored_model):
    with criterion(9, "round trip < 0.5 px, update log follows score gating, streaming causality") as d:
        worst = 0.0
        for s in range(20):
            seq = SyntheticSequence(SyntheticSequenceConfig(), s)
            t = sample_triplet(seq, np.random.default_rng(s))
            worst = max(worst, np.max(np.abs(t.transform.box_to_frame(t.gt.as_array()) - t.frame_gt)))
        rng = np.random.default_rng(9)
        for _ in range(50):
            box = (*rng.uniform(0, 100, size=2), *rng.uniform(4, 40, size=2))
            _, tr = crop_search_region(np.zeros((128, 128, 3)), box, 5.0, 64)
            worst = max(worst, np.max(np.abs(tr.box_to_frame(tr.box_to_crop_norm(box)) - np.array(box))))
        assert worst < 0.5

        seq = SyntheticSequence(DESK.sequence_config(25), [DESK.seed, 999983, 0])
        frames = [seq.frame(i) for i in range(len(seq))]
        out = list(track_sequence(scored_model, frames, seq.boxes[0], DESK, update_interval=3))
        log = out[-1][0].update_log
        expect = [st.frame_index for st, r in out if st.frame_index % 3 == 0 and r.score > DESK.score_threshold]
        assert [e["frame"] for e in log] == expect
        assert [st.frame_index for st, r in out if r.updated_template] == expect
        assert all(e["score"] > DESK.score_threshold for e in log)
        n_boundaries = sum(st.frame_index % 3 == 0 for st, _ in out)

        clean = [r.box for _, r in out]
        for t in (2, 7, 15):
            bad = list(frames)
            bad[t + 1] = np.random.default_rng(t).uniform(0, 255, size=bad[t + 1].shape)
            got = [r.box for _, r in track_sequence(scored_model, bad, seq.boxes[0], DESK, update_interval=3)]
            # results index frame i + 1; everything up to frame t is unchanged
            assert all(np.array_equal(a, b) for a, b in zip(clean[:t], got[:t]))
        d["text"] = f"round trip {worst:.2e} px, {len(log)}/{n_boundaries} boundary updates"


# -- 10: determinism --------------------------------------------------------------


def _tree(path):
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


def test_c10_cli_determinism(tmp_path):
    with criterion(10, "train, track and ablations are bit-identical across reruns") as d:
        cfg = tmp_path / "tiny.json"
        cfg.write_text(json.dumps(TINY))
        runner = CliRunner()

        def run(out, *args):
            r = runner.invoke(main, ["--config", str(cfg), "--seed", "3", "--out-dir", str(tmp_path / out), *args])
            assert r.exit_code == 0, r.output
            return tmp_path / out

        assert run("seq", "make-sequence", "--length", "6")
        compared = 0
        for cmd in (
            ("train", "--steps", "3"),
            ("ablate-streams", "--steps", "1", "--no-stage2"),
            ("ablate-recon", "--steps", "1"),
        ):
            a, b = _tree(run(cmd[0] + "_a", *cmd)), _tree(run(cmd[0] + "_b", *cmd))
            assert a.keys() == b.keys() and all(a[k] == b[k] for k in a), cmd[0]
            compared += len(a)
        ckpt = str(tmp_path / "train_a" / "model.ckpt")
        frames, gt = str(tmp_path / "seq" / "frames"), str(tmp_path / "seq" / "groundtruth.txt")
        a = _tree(run("track_a", "track", "--checkpoint", ckpt, "--frames", frames, "--gt", gt))
        b = _tree(run("track_b", "track", "--checkpoint", ckpt, "--frames", frames, "--gt", gt))
        assert a.keys() == b.keys() and all(a[k] == b[k] for k in a)
        compared += len(a)
        d["text"] = f"{compared} output files compared"
