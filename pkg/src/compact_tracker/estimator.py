"""Scikit-learn style wrapper around training and tracking."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_boxes, check_frames, check_xywh
from .config import RunConfig, load_preset
from .tracker import evaluate_sequence, evaluate_suite, track_sequence
from .training import train_stage1, train_stage2

__all__ = ["CompactTracker"]


class CompactTracker(BaseEstimator):
    """Single-object tracker trained on synthetic sequences.

    ``fit`` draws its own training data from the synthetic generator, so it
    takes no ``X``. ``predict`` tracks one sequence from its first-frame box
    and ``score`` returns the success AUC against ground truth.

    Parameters
    ----------
    preset : str
        ``"desk"`` or ``"paper-B"``.
    steps, stage2_steps : int or None
        Training lengths; ``None`` keeps the preset values.
    streams : str or None
        Active attention streams, e.g. ``"1234"`` or ``"23"``.
    recon_streams : str or None
        Comma-separated reconstruction streams (``t2t,s2s,s2t``); ``""`` disables them.
    mask_ratio : float or None
    seed : int
    overrides : dict or None
        Any further config keys.
    """

    def __init__(self, preset="desk", steps=None, stage2_steps=None, streams=None, recon_streams=None,
                 mask_ratio=None, seed=0, overrides=None):
        self.preset = preset
        self.steps = steps
        self.stage2_steps = stage2_steps
        self.streams = streams
        self.recon_streams = recon_streams
        self.mask_ratio = mask_ratio
        self.seed = seed
        self.overrides = overrides

    def resolved_config(self) -> RunConfig:
        kw = dict(self.overrides or {})
        for key in ("steps", "stage2_steps", "streams", "recon_streams", "mask_ratio"):
            v = getattr(self, key)
            if v is not None:
                kw[key] = v
        kw["seed"] = int(self.seed)
        return load_preset(self.preset).override(**kw)

    def fit(self, X=None, y=None):
        if X is not None or y is not None:
            raise ValueError("CompactTracker trains on generated sequences; call fit() without data")
        cfg = self.resolved_config()
        stage1 = train_stage1(cfg)
        stage2 = train_stage2(stage1.model)
        self.config_ = cfg
        self.model_ = stage1.model
        self.stage1_log_ = stage1.log
        self.stage2_log_ = stage2.log
        return self

    def predict(self, frames, init_box) -> np.ndarray:
        """Pixel boxes ``[n, 4]`` (x, y, w, h); row 0 is ``init_box``."""
        check_is_fitted(self, "model_")
        frames = check_frames(frames)
        box0 = check_xywh(init_box, "init_box")
        rows = [box0] + [r.box for _, r in track_sequence(self.model_, frames, box0, self.config_)]
        return np.array(rows)

    def score(self, frames, gt_boxes) -> float:
        check_is_fitted(self, "model_")
        frames = check_frames(frames)
        gt = check_boxes(gt_boxes, len(frames))
        return evaluate_sequence(self.model_, frames, gt, self.config_).auc

    def evaluate(self, n=None, length=None, seed=None) -> dict:
        """Metrics on the held-out synthetic suite."""
        check_is_fitted(self, "model_")
        return evaluate_suite(self.model_, self.config_, n, length, seed)
