"""Synthetic tracking sequences, triplet sampling and augmentation."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .heads import Box
from .imaging import CropTransform, crop_square, resize, side_for, xywh_to_norm

__all__ = [
    "SyntheticSequenceConfig",
    "SyntheticSequence",
    "generate_sequence",
    "Triplet",
    "CropConfig",
    "sample_triplet",
    "sample_negative",
    "augment",
    "apply_augment",
    "template_crop",
]


@dataclass(frozen=True)
class SyntheticSequenceConfig:
    frame_size: int = 128
    target_min: int = 10
    target_max: int = 18
    motion_sigma: float = 1.5
    scale_jitter: float = 0.02
    length: int = 30
    texture_seed: int = 0

    def __post_init__(self):
        if self.length < 3:
            raise ValueError("sequence length must be >= 3")
        if not 1 <= self.target_min <= self.target_max < self.frame_size:
            raise ValueError("target size range must fit inside the frame")


def _smooth_noise(rng: np.random.Generator, h: int, w: int, cells: int, lo: float, hi: float) -> np.ndarray:
    coarse = rng.uniform(lo, hi, size=(cells, cells, 3))
    return resize(coarse, h, w)


def _render_target(texture: np.ndarray, h: int, w: int, border: int = 2) -> np.ndarray:
    """Blocky texture (nearest-neighbour upsampling) inside a dark outline."""
    n = texture.shape[0]
    iy = np.minimum(np.arange(h) * n // h, n - 1)
    ix = np.minimum(np.arange(w) * n // w, n - 1)
    patch = texture[iy][:, ix].copy()
    b = min(border, h // 4, w // 4)
    if b > 0:
        patch[:b], patch[-b:], patch[:, :b], patch[:, -b:] = 0.0, 0.0, 0.0, 0.0
    return patch


class SyntheticSequence:
    """An outlined, blocky-textured rectangle drifting over a textured background.

    Ground-truth boxes (pixel ``x, y, w, h``) are computed up front; frames are
    rendered on demand and are a pure function of (config, seed, index).
    """

    def __init__(self, cfg: SyntheticSequenceConfig, seed):
        self.cfg = cfg
        self.seed = seed
        rng = np.random.default_rng(self._key(0))
        S = cfg.frame_size
        tex_rng = np.random.default_rng([cfg.texture_seed, *np.atleast_1d(seed).tolist()])
        self.background = _smooth_noise(tex_rng, S, S, 6, 0.15, 0.85)
        self.target_texture = rng.uniform(0.0, 1.0, size=(3, 3, 3))
        w = rng.uniform(cfg.target_min, cfg.target_max)
        h = rng.uniform(cfg.target_min, cfg.target_max)
        cx = rng.uniform(w / 2, S - w / 2)
        cy = rng.uniform(h / 2, S - h / 2)
        boxes = []
        for _ in range(cfg.length):
            boxes.append((cx - w / 2, cy - h / 2, w, h))
            s = np.exp(rng.normal(0.0, cfg.scale_jitter)) if cfg.scale_jitter > 0 else 1.0
            w = min(max(w * s, cfg.target_min), cfg.target_max)
            h = min(max(h * s, cfg.target_min), cfg.target_max)
            if cfg.motion_sigma > 0:
                cx += rng.normal(0.0, cfg.motion_sigma)
                cy += rng.normal(0.0, cfg.motion_sigma)
            cx = min(max(cx, w / 2), S - w / 2)
            cy = min(max(cy, h / 2), S - h / 2)
        self.boxes = np.array(boxes)

    def _key(self, i: int) -> list[int]:
        return [*np.atleast_1d(self.seed).tolist(), i]

    def __len__(self) -> int:
        return self.cfg.length

    def box(self, i: int) -> Box:
        return Box.from_array(xywh_to_norm(self.boxes[i], self.cfg.frame_size, self.cfg.frame_size))

    def frame(self, i: int) -> np.ndarray:
        S = self.cfg.frame_size
        img = self.background.copy()
        x, y, w, h = self.boxes[i]
        xs = np.arange(S) + 0.5
        inside_x = (xs >= x) & (xs < x + w)
        inside_y = (xs >= y) & (xs < y + h)
        ys_in, xs_in = np.nonzero(inside_y)[0], np.nonzero(inside_x)[0]
        if len(ys_in) and len(xs_in):
            img[ys_in[0]:ys_in[-1] + 1, xs_in[0]:xs_in[-1] + 1] = _render_target(self.target_texture, len(ys_in), len(xs_in))
        return img

    def __getitem__(self, i: int) -> tuple[np.ndarray, Box]:
        if not -len(self) <= i < len(self):
            raise IndexError(i)
        i %= len(self)
        return self.frame(i), self.box(i)


def generate_sequence(cfg: SyntheticSequenceConfig, seed) -> list[tuple[np.ndarray, Box]]:
    seq = SyntheticSequence(cfg, seed)
    return [seq[i] for i in range(len(seq))]


@dataclass(frozen=True)
class CropConfig:
    template_side: int = 32
    search_side: int = 64
    template_factor: float = 2.0
    search_factor: float = 5.0
    center_jitter: float = 0.5
    scale_jitter: float = 0.15


@dataclass
class Triplet:
    template1: np.ndarray
    template2: np.ndarray
    search: np.ndarray
    gt: Box | None
    frame_indices: tuple[int, int, int] = (0, 1, 2)
    transform: CropTransform | None = None
    frame_gt: np.ndarray | None = field(default=None, repr=False)

    def gt_array(self) -> np.ndarray:
        return self.gt.as_array()


def _frame_and_pixels(seq, i):
    img, box = seq[i]
    S_h, S_w = img.shape[:2]
    if hasattr(seq, "boxes"):
        xywh = np.asarray(seq.boxes[i], dtype=np.float64)
    else:
        xywh = np.array([(box.cx - box.w / 2) * S_w, (box.cy - box.h / 2) * S_h, box.w * S_w, box.h * S_h])
    return img, xywh


def template_crop(frame: np.ndarray, xywh, side: int, factor: float = 2.0) -> np.ndarray:
    x, y, w, h = xywh
    return crop_square(frame, x + w / 2, y + h / 2, side_for(w, h, factor), side)[0]


def _search_gt(tr: CropTransform, xywh) -> Box:
    cx, cy, w, h = tr.box_to_crop_norm(xywh)
    # clip the visible part of the target to the crop
    x1, y1 = max(cx - w / 2, 0.0), max(cy - h / 2, 0.0)
    x2, y2 = min(cx + w / 2, 1.0), min(cy + h / 2, 1.0)
    return Box.from_corners(x1, y1, x2, y2)


def sample_triplet(seq, rng: np.random.Generator, crop: CropConfig = CropConfig()) -> Triplet:
    """Two templates from the earliest two of three sorted distinct frames, search from the last.

    The search region (``search_factor`` times the box side) is centered on a
    jittered ground-truth box of the search frame.
    """
    n = len(seq)
    if n < 3:
        raise ValueError(f"need at least 3 frames, got {n}")
    i1, i2, i3 = (int(i) for i in np.sort(rng.choice(n, size=3, replace=False)))
    f1, b1 = _frame_and_pixels(seq, i1)
    f2, b2 = _frame_and_pixels(seq, i2)
    f3, b3 = _frame_and_pixels(seq, i3)
    t1 = template_crop(f1, b1, crop.template_side, crop.template_factor)
    t2 = template_crop(f2, b2, crop.template_side, crop.template_factor)
    x, y, w, h = b3
    base = np.sqrt(w * h)
    cx = x + w / 2 + rng.uniform(-1, 1) * crop.center_jitter * base * 0.5
    cy = y + h / 2 + rng.uniform(-1, 1) * crop.center_jitter * base * 0.5
    side = side_for(w, h, crop.search_factor) * float(np.exp(rng.normal(0.0, crop.scale_jitter)))
    search, tr = crop_square(f3, cx, cy, side, crop.search_side)
    return Triplet(t1, t2, search, _search_gt(tr, b3), (i1, i2, i3), tr, np.asarray(b3))


def sample_negative(seq, rng: np.random.Generator, crop: CropConfig = CropConfig()) -> Triplet:
    """Like :func:`sample_triplet` but the search region is centered at a random frame location.

    ``gt`` is None when the target falls outside the crop.
    """
    t = sample_triplet(seq, rng, crop)
    f3, b3 = _frame_and_pixels(seq, t.frame_indices[2])
    H, W = f3.shape[:2]
    side = side_for(b3[2], b3[3], crop.search_factor)
    search, tr = crop_square(f3, rng.uniform(0, W), rng.uniform(0, H), side, crop.search_side)
    cx, cy, w, h = tr.box_to_crop_norm(b3)
    gt = None
    if cx + w / 2 > 0.05 and cx - w / 2 < 0.95 and cy + h / 2 > 0.05 and cy - h / 2 < 0.95:
        gt = _search_gt(tr, b3)
    return replace(t, search=search, gt=gt, transform=tr)


def apply_augment(t: Triplet, factors=(1.0, 1.0, 1.0), flip: bool = False) -> Triplet:
    """Deterministic brightness scaling (clamped to [0, 1]) and optional horizontal flip.

    The flip mirrors all three images and maps the box center cx -> 1 - cx.
    """
    imgs = [np.clip(im * f, 0.0, 1.0) for im, f in zip((t.template1, t.template2, t.search), factors)]
    gt = t.gt
    if flip:
        imgs = [im[:, ::-1].copy() for im in imgs]
        if gt is not None:
            gt = Box(1.0 - gt.cx, gt.cy, gt.w, gt.h)
    return replace(t, template1=imgs[0], template2=imgs[1], search=imgs[2], gt=gt)


def augment(t: Triplet, rng: np.random.Generator, brightness=(0.8, 1.2), flip_prob: float = 0.5) -> Triplet:
    factors = rng.uniform(brightness[0], brightness[1], size=3)
    flip = bool(rng.uniform() < flip_prob)
    return apply_augment(t, tuple(factors), flip)
