"""Learning-rate schedule, layer-wise decay and the AdamW update."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ScheduleConfig",
    "lr_at",
    "layer_multipliers",
    "param_multiplier",
    "AdamW",
    "clip_grad_norm",
    "NonFiniteGradientError",
]


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ScheduleConfig:
    base_lr: float = 1e-4
    warmup_epochs: float = 5
    warmup_factor: float = 0.2
    final_factor: float = 0.1
    total_epochs: float = 500
    layer_decay: float = 0.75

    def __post_init__(self):
        if not (0 < self.warmup_factor <= 1 and 0 < self.final_factor <= 1):
            raise ValueError("warmup_factor and final_factor must lie in (0, 1]")
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError("warmup_epochs must be < total_epochs")


def lr_at(epoch: float, s: ScheduleConfig) -> float:
    """Linear warmup from ``warmup_factor*base`` to ``base``, then cosine down to ``final_factor*base``."""
    if not 0 <= epoch <= s.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {s.total_epochs}]")
    if epoch < s.warmup_epochs:
        frac = epoch / s.warmup_epochs
        return s.base_lr * (s.warmup_factor + (1.0 - s.warmup_factor) * frac)
    t = (epoch - s.warmup_epochs) / (s.total_epochs - s.warmup_epochs)
    lo = s.final_factor * s.base_lr
    return lo + (s.base_lr - lo) * 0.5 * (1.0 + math.cos(math.pi * t))


def layer_multipliers(depth: int, decay: float) -> dict[str, float]:
    """Per-group lr multipliers: embeddings decay**depth, block k (1-based) decay**(depth-k), heads 1."""
    if depth < 1:
        raise ValueError("depth must be >= 1")
    out = {"embed": decay ** depth}
    for k in range(1, depth + 1):
        out[f"block{k}"] = decay ** (depth - k)
    out["head"] = 1.0
    return out


_BLOCK = re.compile(r"^encoder\.blocks\.(\d+)\.")


def param_group(name: str) -> str:
    m = _BLOCK.match(name)
    if m:
        return f"block{int(m.group(1)) + 1}"
    if name.startswith("encoder.") and not name.startswith("encoder.norm."):
        return "embed"
    return "head"


def param_multiplier(name: str, mults: dict[str, float]) -> float:
    return mults[param_group(name)]


def no_weight_decay(name: str) -> bool:
    leaf = name.rsplit(".", 1)[-1]
    return leaf == "bias" or ".norm" in name or "norm1" in name or "norm2" in name or leaf in ("cls_token", "mask_token")


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float = 1.0) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if not math.isfinite(total):
        raise NonFiniteGradientError("gradient norm is not finite")
    if total > max_norm:
        c = max_norm / total
        for k in grads:
            grads[k] = grads[k] * c
    return total


@dataclass
class AdamW:
    """Adam moments with bias correction, then decoupled decay ``p <- p (1 - lr wd)``."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict, grads: dict[str, np.ndarray], lr: float, lr_scale: dict[str, float] | None = None) -> None:
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(f"non-finite gradient for {k}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for k, g in grads.items():
            p = params[k]
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            a = lr * (lr_scale.get(k, 1.0) if lr_scale else 1.0)
            arr = p if isinstance(p, np.ndarray) else p.data
            arr -= a * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay and not no_weight_decay(k):
                arr *= 1.0 - a * self.weight_decay

    def state_dict(self) -> dict:
        return {"step_count": self.step_count, "m": self.m, "v": self.v}
