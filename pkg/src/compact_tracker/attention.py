"""Attention over template/search token segments and its four information streams.

Query/key segments split the attention map into four blocks:

    stream 1  template queries -> template keys   (template self)
    stream 2  template queries -> search keys     (template <- search)
    stream 3  search queries   -> template keys   (search <- template)
    stream 4  search queries   -> search keys     (search self)

Mix, asymmetric-mix and cross attention are written out literally as
concatenations of per-segment attentions so that their equivalence to a
block-masked packed self-attention can be checked numerically.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "AttentionWeights",
    "StreamMask",
    "SegmentedInput",
    "ALL_STREAMS",
    "attention_with_map",
    "packed_self_attention",
    "mix_attention",
    "amix_attention",
    "cross_attention",
    "stream_masked_attention",
    "stream_additive_mask",
    "verify_equivalences",
    "EquivalenceReport",
]

NEG_INF = -np.inf


@dataclass
class AttentionWeights:
    """Q/K/V projections, each ``d x (heads * d_k)``; head h uses columns h*d_k:(h+1)*d_k."""

    W_Q: Tensor
    W_K: Tensor
    W_V: Tensor
    heads: int
    d_k: int

    def __post_init__(self):
        self.W_Q, self.W_K, self.W_V = (ad.as_tensor(w) for w in (self.W_Q, self.W_K, self.W_V))
        if self.heads < 1 or self.d_k < 1:
            raise ValueError("heads and d_k must be positive")
        d = self.W_Q.shape[0]
        for name, w in (("W_Q", self.W_Q), ("W_K", self.W_K), ("W_V", self.W_V)):
            if w.ndim != 2 or w.shape != (d, self.heads * self.d_k):
                raise ad.DimensionError(
                    f"{name} has shape {w.shape}, expected ({d}, {self.heads * self.d_k})"
                )

    @property
    def d(self) -> int:
        return self.W_Q.shape[0]

    @classmethod
    def random(cls, d: int, heads: int, d_k: int, rng: np.random.Generator, std: float | None = None):
        std = 1.0 / math.sqrt(d) if std is None else std
        mats = [Tensor(rng.normal(0.0, std, size=(d, heads * d_k))) for _ in range(3)]
        return cls(*mats, heads=heads, d_k=d_k)


@dataclass(frozen=True)
class StreamMask:
    """Which of the four information streams are active."""

    s1: bool = True
    s2: bool = True
    s3: bool = True
    s4: bool = True

    @classmethod
    def parse(cls, spec: str) -> "StreamMask":
        """``"1234"``, ``"134"``, ``"23"`` ... (digits of the active streams)."""
        spec = str(spec).strip().replace(",", "").replace("{", "").replace("}", "")
        if not spec or any(c not in "1234" for c in spec):
            raise ValueError(f"invalid stream mask {spec!r}; use digits from 1234")
        return cls(*(str(i) in spec for i in range(1, 5)))

    def __str__(self) -> str:
        return "".join(str(i + 1) for i, on in enumerate(self.as_tuple()) if on)

    def as_tuple(self) -> tuple[bool, bool, bool, bool]:
        return (self.s1, self.s2, self.s3, self.s4)

    def validate(self, has_template: bool = True, has_search: bool = True) -> None:
        if has_template and not (self.s1 or self.s2):
            raise ValueError(f"stream mask {{{self}}} leaves template queries without keys")
        if has_search and not (self.s3 or self.s4):
            raise ValueError(f"stream mask {{{self}}} leaves search queries without keys")


ALL_STREAMS = StreamMask()

# stream configurations of the information-stream ablation, in table order
TABLE1_MASKS = tuple(StreamMask.parse(s) for s in ("1234", "134", "234", "123", "23"))


@dataclass
class SegmentedInput:
    X_z: Tensor
    X_s: Tensor

    def __post_init__(self):
        self.X_z, self.X_s = ad.as_tensor(self.X_z), ad.as_tensor(self.X_s)
        if self.X_z.ndim < 2 or self.X_s.ndim < 2:
            raise ad.DimensionError("segments must be at least 2-D (tokens x channels)")
        if self.X_z.shape[-2] < 1 or self.X_s.shape[-2] < 1:
            raise ValueError("both segments need at least one token")
        if self.X_z.shape[-1] != self.X_s.shape[-1] or self.X_z.shape[:-2] != self.X_s.shape[:-2]:
            raise ad.DimensionError(f"segment shapes {self.X_z.shape} and {self.X_s.shape} disagree")

    @property
    def L_z(self) -> int:
        return self.X_z.shape[-2]

    @property
    def L_s(self) -> int:
        return self.X_s.shape[-2]

    def packed(self) -> Tensor:
        return ad.concat([self.X_z, self.X_s], axis=-2)


def _split_heads(x: Tensor, heads: int, d_k: int) -> Tensor:
    lead, L = x.shape[:-2], x.shape[-2]
    r = ad.reshape(x, (*lead, L, heads, d_k))
    n = r.ndim
    return ad.transpose(r, (*range(n - 3), n - 2, n - 3, n - 1))


def _merge_heads(x: Tensor) -> Tensor:
    n = x.ndim
    lead, H, L, dk = x.shape[:-3], x.shape[-3], x.shape[-2], x.shape[-1]
    r = ad.transpose(x, (*range(n - 3), n - 2, n - 3, n - 1))
    return ad.reshape(r, (*lead, L, H * dk))


def attention_with_map(X_Q, X_KV, w: AttentionWeights, add_mask=None) -> tuple[Tensor, Tensor]:
    """Multi-head attention of queries ``X_Q`` against keys/values ``X_KV``.

    Returns ``(out, amap)`` with ``out`` of shape ``[..., L_q, heads*d_k]``
    (heads concatenated, no output projection) and ``amap`` of shape
    ``[..., heads, L_q, L_kv]``. Logits are scaled by 1/sqrt(d_k).
    ``add_mask`` is an ``L_q x L_kv`` array of 0 / -inf.
    """
    X_Q, X_KV = ad.as_tensor(X_Q), ad.as_tensor(X_KV)
    if X_Q.shape[-1] != w.d or X_KV.shape[-1] != w.d:
        raise ad.DimensionError(
            f"inputs {X_Q.shape} / {X_KV.shape} do not match projection width {w.d}"
        )
    q = _split_heads(ad.matmul(X_Q, w.W_Q), w.heads, w.d_k)
    k = _split_heads(ad.matmul(X_KV, w.W_K), w.heads, w.d_k)
    v = _split_heads(ad.matmul(X_KV, w.W_V), w.heads, w.d_k)
    logits = ad.scale(ad.matmul(q, k.T), 1.0 / math.sqrt(w.d_k))
    if add_mask is not None:
        m = np.asarray(add_mask, dtype=np.float64)
        if m.shape != (X_Q.shape[-2], X_KV.shape[-2]):
            raise ad.DimensionError(f"mask {m.shape} does not match {X_Q.shape[-2]}x{X_KV.shape[-2]}")
        amap = ad.masked_softmax(logits, m)
    else:
        amap = ad.masked_softmax(logits)
    return _merge_heads(ad.matmul(amap, v)), amap


def stream_additive_mask(L_z: int, L_s: int, m: StreamMask, n_prefix: int = 0) -> np.ndarray:
    """Additive {0, -inf} mask over ``[prefix; template; search]`` tokens.

    Prefix tokens (e.g. a class token) are never masked in either direction.
    """
    n = n_prefix + L_z + L_s
    mask = np.zeros((n, n))
    z = slice(n_prefix, n_prefix + L_z)
    s = slice(n_prefix + L_z, n)
    if not m.s1:
        mask[z, z] = NEG_INF
    if not m.s2:
        mask[z, s] = NEG_INF
    if not m.s3:
        mask[s, z] = NEG_INF
    if not m.s4:
        mask[s, s] = NEG_INF
    return mask


def packed_self_attention(x: SegmentedInput, w: AttentionWeights) -> Tensor:
    cat = x.packed()
    return attention_with_map(cat, cat, w)[0]


def mix_attention(x: SegmentedInput, w: AttentionWeights) -> Tensor:
    cat = x.packed()
    return ad.concat(
        [attention_with_map(x.X_z, cat, w)[0], attention_with_map(x.X_s, cat, w)[0]], axis=-2
    )


def amix_attention(x: SegmentedInput, w: AttentionWeights) -> Tensor:
    cat = x.packed()
    return ad.concat(
        [attention_with_map(x.X_z, x.X_z, w)[0], attention_with_map(x.X_s, cat, w)[0]], axis=-2
    )


def cross_attention(x: SegmentedInput, w: AttentionWeights) -> Tensor:
    return ad.concat(
        [attention_with_map(x.X_z, x.X_s, w)[0], attention_with_map(x.X_s, x.X_z, w)[0]], axis=-2
    )


def stream_masked_attention(x: SegmentedInput, w: AttentionWeights, m: StreamMask, return_map: bool = False):
    m.validate()
    cat = x.packed()
    out, amap = attention_with_map(cat, cat, w, stream_additive_mask(x.L_z, x.L_s, m))
    return (out, amap) if return_map else out


# ---------------------------------------------------------------------------
# equivalence verification

IDENTITIES = ("pself_eq_mix", "pself_eq_mix_grad", "amix_eq_mask134", "cross_eq_mask23", "maskall_eq_pself")


@dataclass
class EquivalenceReport:
    trials: int
    tol: float
    max_deviation: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(v <= self.tol for v in self.max_deviation.values())

    def failures(self) -> list[str]:
        return [k for k, v in self.max_deviation.items() if not v <= self.tol]

    def to_dict(self) -> dict:
        return {
            "trials": self.trials,
            "tol": self.tol,
            "identities": {
                k: {"max_deviation": v, "passed": bool(v <= self.tol)} for k, v in self.max_deviation.items()
            },
            "passed": self.passed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        lines = [f"attention equivalences: {self.trials} trials, tol={self.tol:g}"]
        for k, v in self.max_deviation.items():
            lines.append(f"  {'PASS' if v <= self.tol else 'FAIL'}  {k:<20s} max|dev|={v:.3e}")
        lines.append("all identities hold" if self.passed else "FAILED: " + ", ".join(self.failures()))
        return "\n".join(lines)


def _grad_wrt_inputs(fn, x: SegmentedInput, w: AttentionWeights) -> np.ndarray:
    X_z = Tensor(x.X_z.data, requires_grad=True)
    X_s = Tensor(x.X_s.data, requires_grad=True)
    with ad.Tape() as tape:
        out = fn(SegmentedInput(X_z, X_s), w)
        # fixed random readout so the scalar head is not symmetric in the outputs
        head = np.cos(np.arange(out.size, dtype=np.float64)).reshape(out.shape)
        loss = ad.tsum(ad.mul(out, head))
    ad.backward(loss, tape)
    return np.concatenate([X_z.grad.ravel(), X_s.grad.ravel()])


def _corrupted(w: AttentionWeights) -> AttentionWeights:
    wk = w.W_K.data.copy()
    wk.flat[0] += 1e-3
    return AttentionWeights(w.W_Q, Tensor(wk), w.W_V, heads=w.heads, d_k=w.d_k)


def verify_equivalences(
    trials: int = 100,
    seed: int = 0,
    tol: float = 1e-9,
    L_range: tuple[int, int] = (1, 16),
    dims: tuple[int, ...] = (4, 8, 16),
    heads: tuple[int, ...] = (1, 2, 4),
    corrupt: str | None = None,
) -> EquivalenceReport:
    """Check every attention-variant identity on random inputs.

    ``corrupt`` names one identity whose second construction gets a perturbed
    W_K entry (negative control).
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if corrupt is not None and corrupt not in IDENTITIES:
        raise ValueError(f"unknown identity {corrupt!r}")
    rng = np.random.default_rng(seed)
    dev = {k: 0.0 for k in IDENTITIES}
    for _ in range(trials):
        L_z = int(rng.integers(L_range[0], L_range[1] + 1))
        L_s = int(rng.integers(L_range[0], L_range[1] + 1))
        d = int(rng.choice(dims))
        H = int(rng.choice(heads))
        d_k = max(1, d // H)
        w = AttentionWeights.random(d, H, d_k, rng)
        x = SegmentedInput(Tensor(rng.normal(size=(L_z, d))), Tensor(rng.normal(size=(L_s, d))))

        def alt(name):
            return _corrupted(w) if corrupt == name else w

        pself = packed_self_attention(x, w).data
        checks = {
            "pself_eq_mix": (pself, mix_attention(x, alt("pself_eq_mix")).data),
            "amix_eq_mask134": (
                amix_attention(x, w).data,
                stream_masked_attention(x, alt("amix_eq_mask134"), StreamMask.parse("134")).data,
            ),
            "cross_eq_mask23": (
                cross_attention(x, w).data,
                stream_masked_attention(x, alt("cross_eq_mask23"), StreamMask.parse("23")).data,
            ),
            "maskall_eq_pself": (
                pself,
                stream_masked_attention(x, alt("maskall_eq_pself"), ALL_STREAMS).data,
            ),
            "pself_eq_mix_grad": (
                _grad_wrt_inputs(packed_self_attention, x, w),
                _grad_wrt_inputs(mix_attention, x, alt("pself_eq_mix_grad")),
            ),
        }
        for k, (a, b) in checks.items():
            dev[k] = max(dev[k], float(np.max(np.abs(a - b))))
    return EquivalenceReport(trials=trials, tol=tol, max_deviation=dev)
