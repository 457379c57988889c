import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from compact_tracker import CompactTracker
from compact_tracker._validation import check_boxes, check_frames, check_image, check_xywh
from compact_tracker.data import SyntheticSequence

TINY = {"d_model": 16, "dec_dim": 16, "box_hidden": 16, "score_hidden": 16, "batch_size": 2}


def _est(**kw):
    return CompactTracker(steps=2, stage2_steps=1, overrides=TINY, **kw)


def test_get_params_and_clone():
    est = _est(streams="23", seed=3)
    p = est.get_params()
    assert p["streams"] == "23" and p["seed"] == 3 and p["overrides"] == TINY
    c = clone(est)
    assert c.get_params() == p and c is not est
    est.set_params(mask_ratio=0.5)
    assert est.resolved_config().mask_ratio == 0.5


def test_unfitted_raises():
    with pytest.raises(NotFittedError):
        _est().predict([np.zeros((8, 8, 3))] * 2, (1, 1, 2, 2))


def test_fit_rejects_data():
    with pytest.raises(ValueError):
        _est().fit(np.zeros((2, 2)))


def test_fit_predict_score():
    est = _est().fit()
    assert len(est.stage1_log_) == 2 and len(est.stage2_log_) == 1
    seq = SyntheticSequence(est.config_.sequence_config(4), [0, 1])
    frames = [seq.frame(i) for i in range(4)]
    boxes = est.predict(frames, seq.boxes[0])
    assert boxes.shape == (4, 4) and np.array_equal(boxes[0], seq.boxes[0])
    assert 0.0 <= est.score(frames, seq.boxes) <= 1.0
    assert set(est.evaluate(n=1, length=3)) >= {"auc", "precision", "mean_iou"}


def test_validation_helpers():
    with pytest.raises(ValueError):
        check_image(np.zeros((4, 4)))
    with pytest.raises(ValueError):
        check_image(np.full((4, 4, 3), 2.0))
    with pytest.raises(ValueError):
        check_image(np.zeros((4, 4, 3)), side=8)
    with pytest.raises(ValueError):
        check_frames([np.zeros((4, 4, 3)), np.zeros((5, 5, 3))])
    with pytest.raises(ValueError):
        check_frames([np.zeros((4, 4, 3))])
    with pytest.raises(ValueError):
        check_xywh((0, 0, 0, 1))
    with pytest.raises(ValueError):
        check_xywh((0, 0, 1))
    with pytest.raises(ValueError):
        check_boxes(np.ones((3, 4)), 2)
    assert check_xywh([1, 2, 3, 4]).tolist() == [1.0, 2.0, 3.0, 4.0]
