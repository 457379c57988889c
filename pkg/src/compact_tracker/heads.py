"""Box geometry, the corner-heatmap box head, the score head and the tracking loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import _param, trunc_normal

__all__ = [
    "Box",
    "iou",
    "giou",
    "CornerHeatmaps",
    "BoxHead",
    "ScoreHead",
    "LossWeights",
    "stage1_loss",
    "stage1_loss_tensor",
    "cell_centers",
    "CXCYWH_FROM_CORNERS",
]


@dataclass(frozen=True)
class Box:
    """Axis-aligned box (center x, center y, width, height) normalized to [0, 1]."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(np.isfinite(vals)):
            raise ValueError(f"non-finite box {vals}")
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ValueError(f"box center ({self.cx}, {self.cy}) outside [0, 1]")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise ValueError(f"box size ({self.w}, {self.h}) outside (0, 1]")

    @classmethod
    def from_corners(cls, x1, y1, x2, y2) -> "Box":
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    @classmethod
    def from_array(cls, a) -> "Box":
        return cls(*(float(v) for v in a))

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h])

    def corners(self) -> np.ndarray:
        return np.array([self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2])

    @property
    def area(self) -> float:
        return self.w * self.h


def _corners(b) -> np.ndarray:
    if isinstance(b, Box):
        return b.corners()
    return np.asarray(b, dtype=np.float64)


def _overlap_terms(a, b):
    a, b = _corners(a), _corners(b)
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    hull = (max(a[2], b[2]) - min(a[0], b[0])) * (max(a[3], b[3]) - min(a[1], b[1]))
    return inter, union, hull


def iou(a, b) -> float:
    """IoU of two boxes (``Box`` or corner arrays ``x1, y1, x2, y2``)."""
    inter, union, _ = _overlap_terms(a, b)
    return inter / union if union > 0 else 0.0


def giou(a, b) -> float:
    """Generalized IoU: IoU - |hull \\ (A u B)| / |hull|."""
    inter, union, hull = _overlap_terms(a, b)
    return inter / union - (hull - union) / hull


def cell_centers(G: int) -> np.ndarray:
    """``[G*G, 2]`` (x, y) centers of a raster G x G grid in [0, 1] coordinates."""
    c = (np.arange(G) + 0.5) / G
    xs, ys = np.meshgrid(c, c)
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


# (x1, y1, x2, y2) @ M -> (cx, cy, w, h)
CXCYWH_FROM_CORNERS = np.array(
    [
        [0.5, 0.0, -1.0, 0.0],
        [0.0, 0.5, 0.0, -1.0],
        [0.5, 0.0, 1.0, 0.0],
        [0.0, 0.5, 0.0, 1.0],
    ]
)


@dataclass
class CornerHeatmaps:
    top_left: np.ndarray
    bottom_right: np.ndarray


class BoxHead:
    """Two per-cell perceptrons (top-left, bottom-right) with soft-argmax corners."""

    def __init__(self, d_model: int, grid: int, hidden: int | None = None, rng=None, prefix: str = "box_head"):
        rng = np.random.default_rng(0) if rng is None else rng
        self.grid = grid
        self.prefix = prefix
        hidden = hidden or d_model
        self.params: dict[str, Tensor] = {}
        for corner in ("tl", "br"):
            pre = f"{prefix}.{corner}"
            self.params[f"{pre}.fc1.weight"] = _param(trunc_normal(rng, (d_model, hidden)), f"{pre}.fc1.weight")
            self.params[f"{pre}.fc1.bias"] = _param(np.zeros(hidden), f"{pre}.fc1.bias")
            self.params[f"{pre}.fc2.weight"] = _param(trunc_normal(rng, (hidden, 1)), f"{pre}.fc2.weight")
            self.params[f"{pre}.fc2.bias"] = _param(np.zeros(1), f"{pre}.fc2.bias")
        self._centers = cell_centers(grid)

    def logits(self, search_tokens, corner: str) -> Tensor:
        P = lambda k: self.params[f"{self.prefix}.{corner}.{k}"]  # noqa: E731
        t = ad.as_tensor(search_tokens)
        if t.shape[-2] != self.grid * self.grid:
            raise ad.DimensionError(f"{t.shape[-2]} search tokens, expected {self.grid ** 2}")
        h = ad.gelu(ad.add(ad.matmul(t, P("fc1.weight")), P("fc1.bias")))
        z = ad.add(ad.matmul(h, P("fc2.weight")), P("fc2.bias"))
        return ad.reshape(z, z.shape[:-1])

    def soft_argmax(self, logits) -> tuple[Tensor, Tensor]:
        """Heatmap (softmax over cells) and its expected cell-center coordinate."""
        prob = ad.masked_softmax(logits)
        lead = prob.shape[:-1]
        p2 = ad.reshape(prob, (*lead, 1, prob.shape[-1])) if prob.ndim >= 1 else prob
        xy = ad.matmul(p2, self._centers)
        return prob, ad.reshape(xy, (*lead, 2))

    def corners(self, search_tokens) -> tuple[Tensor, CornerHeatmaps]:
        """``[..., 4]`` corner tensor (x1, y1, x2, y2) plus both heatmaps."""
        p_tl, tl = self.soft_argmax(self.logits(search_tokens, "tl"))
        p_br, br = self.soft_argmax(self.logits(search_tokens, "br"))
        return ad.concat([tl, br], axis=-1), CornerHeatmaps(p_tl.data, p_br.data)

    def __call__(self, search_tokens) -> tuple[Box | list[Box], CornerHeatmaps]:
        c, maps = self.corners(search_tokens)
        arr = corners_to_boxes(c.data)
        return (arr[0] if c.ndim == 1 else arr), maps


def corners_to_boxes(c: np.ndarray) -> list[Box]:
    """Canonicalize corner order and build boxes; zero extents become a tiny positive size."""
    c = np.atleast_2d(c)
    out = []
    for x1, y1, x2, y2 in c:
        x1, x2 = sorted((x1, x2))
        y1, y2 = sorted((y1, y2))
        w = min(max(x2 - x1, 1e-6), 1.0)
        h = min(max(y2 - y1, 1e-6), 1.0)
        out.append(Box(float(np.clip((x1 + x2) / 2, 0, 1)), float(np.clip((y1 + y2) / 2, 0, 1)), w, h))
    return out


class ScoreHead:
    """3-layer perceptron on the class token, sigmoid output."""

    def __init__(self, d_model: int, hidden: int | None = None, rng=None, prefix: str = "score_head"):
        rng = np.random.default_rng(0) if rng is None else rng
        hidden = hidden or d_model
        self.prefix = prefix
        dims = [(d_model, hidden), (hidden, hidden), (hidden, 1)]
        self.params: dict[str, Tensor] = {}
        for i, (a, b) in enumerate(dims, start=1):
            self.params[f"{prefix}.fc{i}.weight"] = _param(trunc_normal(rng, (a, b)), f"{prefix}.fc{i}.weight")
            self.params[f"{prefix}.fc{i}.bias"] = _param(np.zeros(b), f"{prefix}.fc{i}.bias")

    def logit(self, class_token) -> Tensor:
        P = lambda k: self.params[f"{self.prefix}.{k}"]  # noqa: E731
        h = ad.as_tensor(class_token)
        for i in (1, 2, 3):
            h = ad.add(ad.matmul(h if h.ndim >= 2 else ad.reshape(h, (1, h.shape[0])), P(f"fc{i}.weight")), P(f"fc{i}.bias"))
            if i < 3:
                h = ad.gelu(h)
        return ad.reshape(h, h.shape[:-1]) if h.shape[-1] == 1 else h

    def __call__(self, class_token) -> np.ndarray | float:
        s = ad.sigmoid(self.logit(class_token)).data
        return float(s.reshape(-1)[0]) if ad.as_tensor(class_token).ndim == 1 else s.reshape(-1)


@dataclass(frozen=True)
class LossWeights:
    l1: float = 5.0
    giou: float = 2.0
    dec: float = 0.3


def stage1_loss(pred: Box, gt: Box, l_dec: float, lam: LossWeights = LossWeights()) -> float:
    """lam.l1 * mean|pred - gt| + lam.giou * (1 - GIoU) + lam.dec * l_dec."""
    l1 = float(np.mean(np.abs(pred.as_array() - gt.as_array())))
    return lam.l1 * l1 + lam.giou * (1.0 - giou(pred, gt)) + lam.dec * l_dec


def stage1_loss_tensor(pred_corners: Tensor, gt_boxes: np.ndarray, l_dec: Tensor | None, lam: LossWeights = LossWeights()):
    """Differentiable batched tracking loss.

    ``pred_corners`` is ``[B, 4]`` (x1, y1, x2, y2); ``gt_boxes`` is ``[B, 4]``
    (cx, cy, w, h). The decoder term is omitted entirely when ``l_dec`` is
    None or its weight is 0. Returns ``(loss, parts)``.
    """
    gt = np.asarray(gt_boxes, dtype=np.float64)
    gt_corners = np.concatenate([gt[:, :2] - gt[:, 2:] / 2, gt[:, :2] + gt[:, 2:] / 2], axis=1)
    pred_cxcywh = ad.matmul(pred_corners, CXCYWH_FROM_CORNERS)
    l1 = ad.l1(pred_cxcywh, gt)
    lg = ad.giou_loss(pred_corners, gt_corners)
    loss = ad.add(ad.scale(l1, lam.l1), ad.scale(lg, lam.giou))
    parts = {"l1": l1.item(), "giou_loss": lg.item()}
    if l_dec is not None and lam.dec != 0.0:
        loss = ad.add(loss, ad.scale(l_dec, lam.dec))
    return loss, parts
