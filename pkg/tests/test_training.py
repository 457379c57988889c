import math

import numpy as np
import pytest

from compact_tracker.config import RunConfig
from compact_tracker.model import TrackerModel
from compact_tracker.training import (
    TrainingDiverged,
    make_batch,
    roi_for,
    stage1_gradients,
    stage2_dataset,
    train_stage1,
    train_stage2,
)

TINY = RunConfig(d_model=16, heads=2, dec_dim=16, box_hidden=16, score_hidden=16, batch_size=2)


def test_zero_steps_returns_initialization():
    r = train_stage1(TINY, steps=0)
    init = TrackerModel(TINY).state_arrays()
    assert r.log == []
    assert all(np.array_equal(init[k], v) for k, v in r.model.state_arrays().items())


def test_stage1_is_deterministic():
    a = train_stage1(TINY, steps=3)
    b = train_stage1(TINY, steps=3)
    assert a.log == b.log
    sa, sb = a.model.state_arrays(), b.model.state_arrays()
    assert all(np.array_equal(sa[k], sb[k]) for k in sa)
    c = train_stage1(TINY, steps=3, seed=1)
    assert c.log != a.log


def test_log_records_every_component():
    r = train_stage1(TINY, steps=2)
    rec = r.log[-1]
    for k in ("step", "lr", "l1", "giou_loss", "recon_t2t", "recon_s2s", "recon_s2t", "total", "grad_norm"):
        assert k in rec
    assert all(math.isfinite(v) for v in rec.values())


def test_score_head_untouched_in_stage1():
    init = TrackerModel(TINY).state_arrays()
    out = train_stage1(TINY, steps=2).model.state_arrays()
    for k in init:
        if k.startswith("score_head."):
            assert np.array_equal(init[k], out[k])
        elif k.startswith("encoder.blocks.0.attn"):
            assert not np.array_equal(init[k], out[k])


def test_stage2_freezes_everything_but_the_score_head():
    model = TrackerModel(TINY)
    before = model.state_arrays()
    r = train_stage2(model, steps=4)
    after = model.state_arrays()
    assert len(r.log) == 4
    changed = {k for k in before if not np.array_equal(before[k], after[k])}
    assert changed and all(k.startswith("score_head.") for k in changed)


def test_stage2_zero_steps_is_noop():
    model = TrackerModel(TINY)
    before = model.state_arrays()
    train_stage2(model, steps=0)
    assert all(np.array_equal(before[k], v) for k, v in model.state_arrays().items())


def test_stage2_labels_are_binary():
    X, y = stage2_dataset(TrackerModel(TINY), TINY, 6, 0)
    assert X.shape == (6, 16) and set(np.unique(y)) <= {0.0, 1.0}


def test_batches_are_keyed_by_step():
    a, b = make_batch(TINY, 4), make_batch(TINY, 4)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["search"], make_batch(TINY, 5)["search"])


def test_roi_is_clipped_square():
    r = roi_for(np.array([0.5, 0.5, 0.1, 0.1]), 2.0)
    assert np.allclose(r, [0.5, 0.5, 0.2, 0.2])
    r = roi_for(np.array([0.05, 0.5, 0.2, 0.2]), 2.0)
    assert r[0] - r[2] / 2 == 0.0 and np.isclose(r[2], 0.25)


def _grads(cfg, recon):
    model = TrackerModel(cfg)
    batch = make_batch(cfg, 0)
    out, g = stage1_gradients(model, batch, np.random.default_rng(0), recon)
    return out, g


def test_no_recon_equals_zero_lambda_exactly():
    _, none = _grads(TINY, ())
    _, zero = _grads(TINY.override(lambda_dec=0.0), None)
    keys = [k for k in none if not k.startswith(("self_decoder", "cross_decoder"))]
    assert keys and all(np.array_equal(none[k], zero[k]) for k in keys)
    assert not any(k.startswith(("self_decoder", "cross_decoder")) for k in none)


def test_recon_term_reaches_every_encoder_group():
    _, base = _grads(TINY, ())
    _, full = _grads(TINY, ("t2t", "s2s", "s2t"))
    groups = {}
    for k in base:
        if k.startswith("encoder."):
            d = full[k] - base[k]
            assert np.all(np.isfinite(d))
            g = k.split(".")[1] if not k.startswith("encoder.blocks.") else ".".join(k.split(".")[:3])
            groups[g] = groups.get(g, False) or bool(np.any(d != 0))
    assert all(groups.values()), groups


def test_divergence_aborts_with_last_good_state(monkeypatch):
    from compact_tracker import model as model_mod

    real = model_mod.TrackerModel.training_loss
    calls = {"n": 0}

    def poisoned(self, batch, rng, recon=None):
        out = real(self, batch, rng, recon)
        calls["n"] += 1
        if calls["n"] == 2:
            out.parts["total"] = float("nan")
        return out

    monkeypatch.setattr(model_mod.TrackerModel, "training_loss", poisoned)
    with pytest.raises(TrainingDiverged) as info:
        train_stage1(TINY, steps=3)
    assert info.value.last_good is not None
