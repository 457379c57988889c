"""Correlative masked modeling: token masking, RoI cropping of search tokens,
self/cross reconstruction decoders and the reconstruction loss.

Three reconstruction streams are supported:

* ``t2t`` template tokens -> template pixels (self-decoder)
* ``s2s`` search tokens -> search pixels (self-decoder)
* ``s2t`` RoI-cropped search tokens -> template pixels (cross-decoder)
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import _param, init_block, transformer_block

__all__ = [
    "STREAMS",
    "MaskPlan",
    "DecoderConfig",
    "ReconstructionOutput",
    "MaskedDecoder",
    "sample_mask",
    "prroi_weights",
    "prroi_crop",
    "masked_weight",
    "decoder_loss",
    "xavier_uniform",
]

STREAMS = ("t2t", "s2s", "s2t")


@dataclass(frozen=True)
class MaskPlan:
    total: int
    masked: tuple[int, ...]
    ratio: float

    def __post_init__(self):
        m = tuple(int(i) for i in self.masked)
        object.__setattr__(self, "masked", m)
        if any(b <= a for a, b in zip(m, m[1:])):
            raise ValueError("masked indices must be strictly increasing")
        if m and not (0 <= m[0] and m[-1] < self.total):
            raise ValueError("masked index out of range")

    def indicator(self) -> np.ndarray:
        out = np.zeros(self.total)
        out[list(self.masked)] = 1.0
        return out


def sample_mask(L: int, ratio: float, rng: np.random.Generator) -> MaskPlan:
    """Uniformly choose ``round(ratio * L)`` of ``L`` positions without replacement."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"mask ratio must be in [0, 1), got {ratio}")
    n = int(round(ratio * L))
    if ratio > 0 and n < 1:
        raise ValueError(f"ratio {ratio} masks no token out of {L}")
    idx = np.sort(rng.choice(L, size=n, replace=False)) if n else np.array([], dtype=int)
    return MaskPlan(L, tuple(idx.tolist()), float(ratio))


# ---------------------------------------------------------------------------
# precise RoI pooling over a clamped bilinear token field


def _hat_antideriv(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, -1.0, 1.0)
    return np.where(t <= 0.0, 0.5 * (t + 1.0) ** 2, 1.0 - 0.5 * (1.0 - t) ** 2)


def _axis_weights(lo: float, hi: float, G: int, out: int) -> np.ndarray:
    """``[out, G]`` averaging weights of each bin of ``[lo, hi]`` (grid units).

    Grid units put token ``j`` at coordinate ``j``; the field is clamped to
    the edge tokens beyond ``[0, G-1]``.
    """
    edges = np.linspace(lo, hi, out + 1)
    a, b = edges[:-1, None], edges[1:, None]
    j = np.arange(G, dtype=np.float64)
    W = _hat_antideriv(np.clip(b, 0.0, G - 1.0) - j) - _hat_antideriv(np.clip(a, 0.0, G - 1.0) - j)
    W[:, 0] += np.maximum(0.0, np.minimum(b, 0.0) - a)[:, 0]
    W[:, G - 1] += np.maximum(0.0, b - np.maximum(a, G - 1.0))[:, 0]
    return W / (b - a)


def prroi_weights(G: int, box, out: int) -> np.ndarray:
    """``[out*out, G*G]`` matrix mapping a raster token grid to pooled RoI bins.

    ``box`` is ``(cx, cy, w, h)`` normalized to the token field, whose token
    ``(i, j)`` sits at ``((j + 0.5) / G, (i + 0.5) / G)``.
    """
    cx, cy, w, h = (float(v) for v in _box_array(box))
    if w <= 0 or h <= 0:
        raise ValueError("RoI box must have positive area")
    x0, x1 = (cx - w / 2) * G - 0.5, (cx + w / 2) * G - 0.5
    y0, y1 = (cy - h / 2) * G - 0.5, (cy + h / 2) * G - 0.5
    return np.kron(_axis_weights(y0, y1, G, out), _axis_weights(x0, x1, G, out))


def _box_array(box) -> np.ndarray:
    if hasattr(box, "as_array"):
        return box.as_array()
    if isinstance(box, (list, tuple)) and box and hasattr(box[0], "as_array"):
        return np.stack([b.as_array() for b in box])
    return np.asarray(box, dtype=np.float64)


def prroi_crop(search_tokens, box, out: int) -> Tensor:
    """Integral-average pooling of the bilinear token field over ``out x out`` RoI bins.

    ``search_tokens`` is ``[G, G, d]`` or ``[G*G, d]`` (raster order) with one
    box, or the same with a leading batch axis and one box per sample.
    Returns ``[out*out, d]`` (batched alike). Differentiable in the tokens.
    """
    t = ad.as_tensor(search_tokens)
    boxes = _box_array(box)
    batched = boxes.ndim == 2
    if t.ndim == (4 if batched else 3):
        t = ad.reshape(t, (*t.shape[:-3], t.shape[-3] * t.shape[-2], t.shape[-1]))
    if t.ndim != (3 if batched else 2):
        raise ad.DimensionError(f"token array {t.shape} does not match box array {boxes.shape}")
    N = t.shape[-2]
    G = int(round(math.sqrt(N)))
    if G * G != N:
        raise ad.DimensionError(f"{N} tokens do not form a square grid")
    if not batched:
        return ad.matmul(prroi_weights(G, boxes, out), t)
    if len(boxes) != t.shape[0]:
        raise ad.DimensionError(f"{len(boxes)} boxes for a batch of {t.shape[0]}")
    W = np.stack([prroi_weights(G, b, out) for b in boxes])
    return ad.matmul(W, t)


# ---------------------------------------------------------------------------
# decoders


def xavier_uniform(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in, fan_out = shape[0], shape[-1]
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


@dataclass(frozen=True)
class DecoderConfig:
    depth: int = 1
    d_dec: int = 32
    heads: int = 2
    out_dim: int = 192
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.d_dec % self.heads:
            raise ValueError(f"d_dec {self.d_dec} is not divisible by heads {self.heads}")


@dataclass
class ReconstructionOutput:
    pred: Tensor
    stream: str
    plan: MaskPlan | list[MaskPlan]

    def __post_init__(self):
        if self.stream not in STREAMS:
            raise ValueError(f"unknown stream {self.stream!r}")


class MaskedDecoder:
    """Token embed, mask-token substitution, positional tables, blocks and a pixel projection.

    ``grids`` maps a name to a token count; each gets its own positional table
    so one decoder can serve token sets of different length.
    """

    def __init__(self, cfg: DecoderConfig, d_model: int, grids: dict[str, int], rng=None, prefix: str = "decoder"):
        rng = np.random.default_rng(0) if rng is None else rng
        self.cfg, self.prefix, self.grids = cfg, prefix, dict(grids)
        D = cfg.d_dec
        pre = prefix
        self.params: dict[str, Tensor] = {
            f"{pre}.embed.weight": _param(xavier_uniform(rng, (d_model, D)), f"{pre}.embed.weight"),
            f"{pre}.embed.bias": _param(np.zeros(D), f"{pre}.embed.bias"),
            f"{pre}.mask_token": _param(rng.normal(0.0, 0.02, size=D), f"{pre}.mask_token"),
        }
        for name, n in self.grids.items():
            self.params[f"{pre}.pos_{name}"] = _param(rng.normal(0.0, 0.02, size=(n, D)), f"{pre}.pos_{name}")
        for k in range(cfg.depth):
            self.params.update(init_block(rng, f"{pre}.blocks.{k}", D, cfg.mlp_ratio, init=xavier_uniform))
        self.params[f"{pre}.norm.weight"] = _param(np.ones(D), f"{pre}.norm.weight")
        self.params[f"{pre}.norm.bias"] = _param(np.zeros(D), f"{pre}.norm.bias")
        self.params[f"{pre}.pred.weight"] = _param(xavier_uniform(rng, (D, cfg.out_dim)), f"{pre}.pred.weight")
        self.params[f"{pre}.pred.bias"] = _param(np.zeros(cfg.out_dim), f"{pre}.pred.bias")

    def _p(self, k):
        return self.params[f"{self.prefix}.{k}"]

    def __call__(self, tokens, plan, grid: str, stream: str) -> ReconstructionOutput:
        """Predict per-patch pixels for every position of ``tokens`` (``[L, d]`` or ``[B, L, d]``).

        ``plan`` is one MaskPlan, or one per sample when batched.
        """
        tokens = ad.as_tensor(tokens)
        L = tokens.shape[-2]
        plans = plan if isinstance(plan, (list, tuple)) else [plan]
        if tokens.ndim == 3 and len(plans) != tokens.shape[0]:
            raise ValueError(f"{len(plans)} mask plans for a batch of {tokens.shape[0]}")
        for p in plans:
            if p.total != L:
                raise ValueError(f"mask plan covers {p.total} tokens, decoder got {L}")
        if grid not in self.grids or self.grids[grid] != L:
            raise ValueError(f"no positional table {grid!r} of length {L}")
        D = self.cfg.d_dec
        x = ad.add(ad.matmul(tokens, self._p("embed.weight")), self._p("embed.bias"))
        ind = np.stack([p.indicator() for p in plans]) if tokens.ndim == 3 else plans[0].indicator()
        m = np.broadcast_to(ind[..., None], (*ind.shape, D))
        if m.any():
            x = ad.add(ad.mul(x, 1.0 - m), ad.mul(np.ascontiguousarray(m), self._p("mask_token")))
        x = ad.add(x, self._p(f"pos_{grid}"))
        for k in range(self.cfg.depth):
            x = transformer_block(self.params, f"{self.prefix}.blocks.{k}", x, self.cfg.heads)
        x = ad.layer_norm(x, self._p("norm.weight"), self._p("norm.bias"))
        pred = ad.add(ad.matmul(x, self._p("pred.weight")), self._p("pred.bias"))
        return ReconstructionOutput(pred, stream, plan)


def masked_weight(plan, out_dim: int) -> np.ndarray:
    plans = plan if isinstance(plan, (list, tuple)) else [plan]
    ind = np.stack([p.indicator() for p in plans]) if isinstance(plan, (list, tuple)) else plans[0].indicator()
    return np.broadcast_to(ind[..., None], (*ind.shape, out_dim))


def decoder_loss(
    outputs: dict[str, ReconstructionOutput],
    targets: dict[str, np.ndarray],
    enabled=STREAMS,
) -> tuple[Tensor, dict[str, float]]:
    """Sum over enabled streams of the masked-position MSE.

    ``targets[stream]`` holds the true per-patch pixel vectors aligned with
    ``outputs[stream].pred``. Summation order is t2t, s2s, s2t. Returns the
    loss tensor and the per-stream values.
    """
    enabled = [s for s in STREAMS if s in set(enabled)]
    unknown = set(enabled) - set(STREAMS)
    if unknown:
        raise ValueError(f"unknown streams {sorted(unknown)}")
    total = None
    parts: dict[str, float] = {}
    for s in enabled:
        if s not in outputs or s not in targets:
            raise ValueError(f"enabled stream {s!r} has no output/target")
        out = outputs[s]
        term = ad.mse(out.pred, targets[s], weight=masked_weight(out.plan, out.pred.shape[-1]))
        parts[s] = term.item()
        total = term if total is None else ad.add(total, term)
    if total is None:
        total = Tensor._wrap(np.asarray(0.0))
    return total, parts
