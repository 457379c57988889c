"""Frame-by-frame tracking with a score-gated online template, and sequence metrics."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from .data import template_crop
from .heads import Box, iou
from .imaging import CropTransform, crop_square, side_for

__all__ = [
    "TrackerState",
    "FrameResult",
    "SequenceMetrics",
    "crop_search_region",
    "init_tracker",
    "track_frame",
    "maybe_update_template",
    "track_sequence",
    "evaluate_sequence",
    "success_auc",
    "precision_rate",
    "evaluate_suite",
    "AUC_THRESHOLDS",
]

AUC_THRESHOLDS = np.arange(21) / 20.0  # exact k/20, so IoU 0.6 passes tau 0.6
UPDATE_MODES = ("none", "interval", "score")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TrackerState:
    initial_template: np.ndarray
    online_template: np.ndarray
    last_box: np.ndarray  # frame pixels (x, y, w, h)
    update_interval: int = 25
    score_threshold: float = 0.5
    update_mode: str = "score"
    frame_index: int = 0
    template_side: int = 32
    search_side: int = 64
    template_factor: float = 2.0
    search_factor: float = 5.0
    update_log: tuple = ()

    def __post_init__(self):
        if self.update_mode not in UPDATE_MODES:
            raise ValueError(f"update_mode must be one of {UPDATE_MODES}")
        if self.update_interval < 1:
            raise ValueError("update_interval must be >= 1")


@dataclass(frozen=True)
class FrameResult:
    box: np.ndarray  # frame pixels (x, y, w, h)
    score: float
    updated_template: bool = False
    search_box: np.ndarray | None = field(default=None, repr=False)


def crop_search_region(frame: np.ndarray, ref_xywh, area_factor: float = 5.0, out_side: int = 64) -> tuple[np.ndarray, CropTransform]:
    """Square of side ``area_factor * sqrt(w h)`` around ``ref`` (pixel x, y, w, h), resized to ``out_side``.

    The crop covers ``area_factor**2`` times the box area; the returned
    transform maps crop coordinates back to the frame.
    """
    x, y, w, h = (float(v) for v in ref_xywh)
    if w <= 0 or h <= 0:
        raise ValueError("reference box must have positive size")
    return crop_square(frame, x + w / 2, y + h / 2, side_for(w, h, area_factor), out_side)


def init_tracker(frame: np.ndarray, box_xywh, cfg=None, **overrides) -> TrackerState:
    """Initial state from the first frame and its ground-truth box (pixel x, y, w, h)."""
    kw = {}
    if cfg is not None:
        kw = dict(
            update_interval=cfg.update_interval,
            score_threshold=cfg.score_threshold,
            update_mode=cfg.update_mode,
            template_side=cfg.template_side,
            search_side=cfg.search_side,
            template_factor=cfg.template_factor,
            search_factor=cfg.search_factor,
        )
    kw.update(overrides)
    side = kw.get("template_side", 32)
    tpl = _frozen(template_crop(frame, np.asarray(box_xywh, dtype=np.float64), side, kw.get("template_factor", 2.0)))
    return TrackerState(tpl, tpl, _frozen(box_xywh), **kw)


def _clip_box(xywh, W: int, H: int, min_size: float = 1.0) -> np.ndarray:
    x, y, w, h = xywh
    x1, y1 = np.clip(x, 0, W - min_size), np.clip(y, 0, H - min_size)
    x2, y2 = np.clip(x + w, x1 + min_size, W), np.clip(y + h, y1 + min_size, H)
    return np.array([x1, y1, x2 - x1, y2 - y1])


def track_frame(state: TrackerState, frame: np.ndarray, model) -> tuple[TrackerState, FrameResult]:
    """Locate the target in ``frame`` around the previous box; the state is not mutated."""
    enc = model.encoder.cfg
    if enc.search_side != state.search_side or enc.template_side != state.template_side:
        raise ValueError(
            f"model expects {enc.template_side}/{enc.search_side} crops, state uses "
            f"{state.template_side}/{state.search_side}"
        )
    search, tr = crop_search_region(frame, state.last_box, state.search_factor, state.search_side)
    box_s, score = model.predict(state.initial_template, state.online_template, search)
    H, W = frame.shape[:2]
    box = _clip_box(tr.box_to_frame(box_s), W, H)
    new = replace(state, last_box=_frozen(box), frame_index=state.frame_index + 1)
    return new, FrameResult(box, float(score), False, box_s)


def maybe_update_template(state: TrackerState, frame: np.ndarray, result: FrameResult) -> tuple[TrackerState, FrameResult]:
    """Replace the online template at interval boundaries.

    ``score`` mode requires ``result.score > score_threshold``; ``interval``
    mode updates unconditionally; ``none`` never updates.
    """
    if state.update_mode == "none" or state.frame_index % state.update_interval != 0:
        return state, result
    if state.update_mode == "score" and not result.score > state.score_threshold:
        return state, result
    tpl = _frozen(template_crop(frame, result.box, state.template_side, state.template_factor))
    event = {"frame": state.frame_index, "score": result.score, "mode": state.update_mode}
    return (
        replace(state, online_template=tpl, update_log=state.update_log + (event,)),
        replace(result, updated_template=True),
    )


def track_sequence(model, frames: Iterable[np.ndarray], init_box, cfg=None, **overrides):
    """Generator over ``(state, FrameResult)`` for frames after the first.

    Frames are consumed lazily, so frame ``t`` is read only after the result
    for frame ``t - 1`` has been produced.
    """
    it = iter(frames)
    first = next(it)
    state = init_tracker(first, init_box, cfg, **overrides)
    for frame in it:
        state, res = track_frame(state, frame, model)
        state, res = maybe_update_template(state, frame, res)
        yield state, res


def success_auc(ious) -> float:
    """Mean over thresholds 0, 0.05, ..., 1 of the fraction of frames with IoU >= threshold."""
    ious = np.asarray(ious, dtype=np.float64)
    return float(np.mean([(ious >= t).mean() for t in AUC_THRESHOLDS]))


def precision_rate(center_errors, threshold: float) -> float:
    return float((np.asarray(center_errors) <= threshold).mean())


def _xyxy(b) -> np.ndarray:
    x, y, w, h = b
    return np.array([x, y, x + w, y + h])


@dataclass
class SequenceMetrics:
    ious: np.ndarray
    center_errors: np.ndarray
    auc: float
    precision: float
    mean_iou: float
    boxes: np.ndarray
    scores: np.ndarray
    updates: list

    def summary(self) -> dict:
        return {
            "auc": self.auc,
            "precision": self.precision,
            "mean_iou": self.mean_iou,
            "frames": int(len(self.ious)),
            "template_updates": len(self.updates),
        }


def evaluate_sequence(model, frames, gt_boxes, cfg=None, precision_threshold: float | None = None, **overrides) -> SequenceMetrics:
    """Track from the first frame's ground truth and score frames 1..n-1.

    ``gt_boxes`` are pixel (x, y, w, h). The precision threshold defaults to
    ``precision_fraction`` (5 %) of the frame diagonal.
    """
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64)
    frames = list(frames)
    if len(frames) < 2 or len(gt_boxes) != len(frames):
        raise ValueError("need >= 2 frames and one ground-truth box per frame")
    boxes, scores, updates = [gt_boxes[0]], [1.0], []
    state = None
    for state, res in track_sequence(model, frames, gt_boxes[0], cfg, **overrides):
        boxes.append(res.box)
        scores.append(res.score)
        if res.updated_template:
            updates.append(state.update_log[-1])
    boxes = np.array(boxes)
    ious = np.array([iou(_xyxy(p), _xyxy(g)) for p, g in zip(boxes[1:], gt_boxes[1:])])
    centers = boxes[1:, :2] + boxes[1:, 2:] / 2
    gt_c = gt_boxes[1:, :2] + gt_boxes[1:, 2:] / 2
    err = np.linalg.norm(centers - gt_c, axis=1)
    if precision_threshold is None:
        H, W = frames[0].shape[:2]
        frac = cfg.precision_fraction if cfg is not None else 0.05
        precision_threshold = frac * float(np.hypot(H, W))
    return SequenceMetrics(
        ious, err, success_auc(ious), precision_rate(err, precision_threshold), float(ious.mean()),
        boxes, np.array(scores), updates,
    )


_HELD_OUT = 999_983


def evaluate_suite(model, cfg, n: int | None = None, length: int | None = None, seed: int | None = None, **overrides) -> dict:
    """Track ``n`` held-out synthetic sequences and average their metrics.

    Held-out sequences are keyed ``(seed, 999983, i)``, a key shape the
    training sampler never produces.
    """
    from .data import SyntheticSequence

    n = cfg.eval_sequences if n is None else n
    length = cfg.eval_length if length is None else length
    seed = cfg.seed if seed is None else seed
    per_seq = []
    for i in range(n):
        seq = SyntheticSequence(cfg.sequence_config(length), [seed, _HELD_OUT, i])
        frames = (seq.frame(t) for t in range(len(seq)))
        m = evaluate_sequence(model, list(frames), seq.boxes, cfg, **overrides)
        per_seq.append(m.summary())
    keys = ("auc", "precision", "mean_iou")
    out = {k: float(np.mean([s[k] for s in per_seq])) for k in keys}
    out["sequences"] = n
    out["per_sequence"] = per_seq
    return out
