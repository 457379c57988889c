"""Minimal fp64 tensor engine with tape-based reverse-mode differentiation.

Ops record themselves on the active :class:`Tape` (``with Tape() as tape:``)
whenever at least one input is tracked, i.e. is a ``requires_grad`` leaf or
the output of a recorded op. :func:`backward` replays the tape in reverse.

The op set is deliberately small; anything else is composed from it.
"""
from __future__ import annotations

import math
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "DimensionError",
    "DegenerateRowError",
    "as_tensor",
    "matmul",
    "add",
    "sub",
    "scale",
    "mul",
    "masked_softmax",
    "layer_norm",
    "gelu",
    "sigmoid",
    "concat",
    "slice_axis",
    "reshape",
    "transpose",
    "tsum",
    "mean",
    "mse",
    "l1",
    "giou_loss",
    "bce_with_logits",
    "backward",
    "finite_diff_check",
    "FiniteDiffReport",
    "dump_tensor",
    "load_tensor",
    "dumps_tensor",
    "loads_tensor",
]

GELU_COEF = 0.044715
GELU_SCALE = math.sqrt(2.0 / math.pi)


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateRowError(ValueError):
    """A softmax row has no finite entry left after masking."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tracked", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._tracked = self.requires_grad

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.name = None
        t._tracked = False
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("only division by a python scalar is supported")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# tape


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_state = threading.local()


def _stack() -> list:
    st = getattr(_state, "stack", None)
    if st is None:
        st = _state.stack = []
    return st


class Tape:
    """Ordered record of differentiable ops executed while the tape is active."""

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        st = _stack()
        if st and st[-1] is self:
            st.pop()
        else:  # pragma: no cover - misuse
            st.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        self.records.clear()


def active_tape() -> Tape | None:
    st = _stack()
    return st[-1] if st else None


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], bwd) -> Tensor:
    out = Tensor._wrap(data)
    tape = active_tape()
    if tape is not None and any(t._tracked for t in inputs):
        out._tracked = True
        tape.records.append(_Record(out, inputs, bwd))
    return out


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # sums leading axes that were broadcast (suffix broadcasting only)
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))).reshape(shape)


def _check_suffix(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are incompatible")


# ---------------------------------------------------------------------------
# ops


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` either has the same leading (batch) axes as ``a`` or is a plain
    2-D matrix shared across the batch.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} have mismatched inner extents")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch axes of {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    out = ad @ bd

    def bwd(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a._tracked else None
        gb = None
        if b._tracked:
            gb = np.swapaxes(ad, -1, -2) @ g
            if b.ndim == 2 and gb.ndim > 2:
                gb = gb.reshape(-1, *gb.shape[-2:]).sum(axis=0)
        return ga, gb

    return _result(out, (a, b), bwd)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix(a, b, "add")
    shape_b = b.shape

    def bwd(g):
        return g, _reduce_to(g, shape_b)

    return _result(a.data + b.data, (a, b), bwd)


def sub(a, b) -> Tensor:
    return add(a, scale(b, -1.0))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def mul(a, b) -> Tensor:
    """Elementwise product; ``b`` may be a suffix-shaped operand (e.g. a gain)."""
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix(a, b, "mul")
    ad, bd = a.data, b.data

    def bwd(g):
        ga = g * bd if a._tracked else None
        gb = _reduce_to(g * ad, bd.shape) if b._tracked else None
        return ga, gb

    return _result(ad * bd, (a, b), bwd)


def masked_softmax(x, additive_mask=None) -> Tensor:
    """Softmax over the last axis with an optional additive {0, -inf} mask.

    The mask broadcasts as a suffix of ``x``'s shape. Masked entries come out
    exactly 0; a row with no finite logit raises :class:`DegenerateRowError`.
    """
    x = as_tensor(x)
    z = x.data
    if additive_mask is not None:
        m = additive_mask.data if isinstance(additive_mask, Tensor) else np.asarray(additive_mask, dtype=np.float64)
        if m.shape != z.shape[z.ndim - m.ndim:]:
            raise DimensionError(f"masked_softmax: mask {m.shape} does not match logits {z.shape}")
        z = z + m
    row_max = z.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(row_max)):
        raise DegenerateRowError("masked_softmax: a row has every entry masked")
    e = np.exp(z - row_max)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), bwd)


def layer_norm(x, gain, bias, eps: float = 1e-6) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match width {d}")
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def bwd(g):
        gx = None
        if x._tracked:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = _reduce_to(g * xhat, (d,)) if gain._tracked else None
        gb = _reduce_to(g, (d,)) if bias._tracked else None
        return gx, gg, gb

    return _result(xhat * gd + bias.data, (x, gain, bias), bwd)


def gelu(x) -> Tensor:
    """Tanh-approximated GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    x = as_tensor(x)
    xd = x.data
    x2 = xd * xd
    inner = GELU_SCALE * xd * (1.0 + GELU_COEF * x2)
    th = np.tanh(inner)
    out = 0.5 * xd * (1.0 + th)

    def bwd(g):
        dinner = GELU_SCALE * (1.0 + 3.0 * GELU_COEF * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * dinner),)

    return _result(out, (x,), bwd)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    # split by sign so exp never overflows
    ex = np.exp(-np.abs(xd))
    y = np.where(xd >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ValueError("concat: need at least one tensor")
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != ts[0].shape[:ax] + ts[0].shape[ax + 1:]:
            raise DimensionError(f"concat: shapes {[s.shape for s in ts]} disagree off axis {axis}")
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in ts], axis=ax)

    def bwd(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) if ts[i]._tracked else None
            for i in range(len(ts))
        )

    return _result(out, ts, bwd)


def slice_axis(x, start: int, stop: int, axis: int = 0) -> Tensor:
    x = as_tensor(x)
    ax = axis % x.ndim
    n = x.shape[ax]
    if not (0 <= start < stop <= n):
        raise DimensionError(f"slice: [{start}:{stop}] out of range for extent {n} on axis {axis}")
    idx = [slice(None)] * x.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    shape = x.shape

    def bwd(g):
        gx = np.zeros(shape)
        gx[idx] = g
        return (gx,)

    return _result(x.data[idx].copy(), (x,), bwd)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return _result(out, (x,), lambda g: (g.reshape(old),))


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def tsum(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    if axis is None:
        return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = axis % x.ndim

    def bwd(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return _result(x.data.sum(axis=ax), (x,), bwd)


def mean(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else x.shape[axis % x.ndim]
    return scale(tsum(x, axis), 1.0 / n)


def mse(pred, target, weight=None) -> Tensor:
    """Mean squared error; with ``weight`` the weighted mean sum(w d^2)/sum(w).

    An all-zero weight yields exactly 0 (empty selection).
    """
    pred = as_tensor(pred)
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if t.shape != pred.shape:
        raise DimensionError(f"mse: prediction {pred.shape} and target {t.shape} differ")
    diff = pred.data - t
    if weight is None:
        w = None
        denom = float(diff.size)
    else:
        w = np.broadcast_to(np.asarray(weight, dtype=np.float64), diff.shape)
        denom = float(w.sum())
    if denom == 0.0:
        return _result(np.asarray(0.0), (pred,), lambda g: (np.zeros(diff.shape),))
    sq = diff * diff if w is None else w * diff * diff
    out = np.asarray(sq.sum() / denom)

    def bwd(g):
        base = 2.0 * diff / denom
        return ((base if w is None else base * w) * g,)

    return _result(out, (pred,), bwd)


def l1(pred, target) -> Tensor:
    """Mean absolute difference."""
    pred = as_tensor(pred)
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if t.shape != pred.shape:
        raise DimensionError(f"l1: prediction {pred.shape} and target {t.shape} differ")
    diff = pred.data - t
    n = float(diff.size)
    return _result(np.asarray(np.abs(diff).sum() / n), (pred,), lambda g: (np.sign(diff) * g / n,))


def giou_loss(pred_corners, gt_corners) -> Tensor:
    """Mean of 1 - GIoU over boxes given as (x1, y1, x2, y2) on the last axis.

    Predicted corners are put in canonical order (min, max) per axis before
    evaluation; the gradient is routed back through that reordering.
    Ground-truth corners are constants and must have positive area.
    """
    pred = as_tensor(pred_corners)
    gt = gt_corners.data if isinstance(gt_corners, Tensor) else np.asarray(gt_corners, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[-1] != 4:
        raise DimensionError(f"giou_loss: shapes {pred.shape} and {gt.shape} must match with last extent 4")
    p = pred.data.reshape(-1, 4)
    b = gt.reshape(-1, 4)
    n = p.shape[0]
    swap_x = p[:, 0] > p[:, 2]
    swap_y = p[:, 1] > p[:, 3]
    ax1 = np.minimum(p[:, 0], p[:, 2]); ax2 = np.maximum(p[:, 0], p[:, 2])
    ay1 = np.minimum(p[:, 1], p[:, 3]); ay2 = np.maximum(p[:, 1], p[:, 3])
    bx1, by1, bx2, by2 = b[:, 0], b[:, 1], b[:, 2], b[:, 3]

    rx = np.minimum(ax2, bx2); lx = np.maximum(ax1, bx1)
    ry = np.minimum(ay2, by2); ly = np.maximum(ay1, by1)
    iw = np.maximum(0.0, rx - lx); ih = np.maximum(0.0, ry - ly)
    inter = iw * ih
    aw = ax2 - ax1; ah = ay2 - ay1
    area_a = aw * ah
    area_b = (bx2 - bx1) * (by2 - by1)
    union = area_a + area_b - inter
    cw = np.maximum(ax2, bx2) - np.minimum(ax1, bx1)
    ch = np.maximum(ay2, by2) - np.minimum(ay1, by1)
    hull = cw * ch
    loss = 2.0 - inter / union - union / hull
    out = np.asarray(loss.sum() / n)

    def bwd(g):
        s = g / n
        d_inter = -1.0 / union
        d_union = inter / union ** 2 - 1.0 / hull
        d_hull = union / hull ** 2
        d_i = d_inter - d_union  # union = ... - inter
        pos_w = (rx - lx) > 0
        pos_h = (ry - ly) > 0
        d_iw = d_i * ih * pos_w
        d_ih = d_i * iw * pos_h
        gx1 = -d_iw * (ax1 >= bx1) + d_union * (-ah) + -d_hull * ch * (ax1 <= bx1)
        gx2 = d_iw * (ax2 <= bx2) + d_union * ah + d_hull * ch * (ax2 >= bx2)
        gy1 = -d_ih * (ay1 >= by1) + d_union * (-aw) + -d_hull * cw * (ay1 <= by1)
        gy2 = d_ih * (ay2 <= by2) + d_union * aw + d_hull * cw * (ay2 >= by2)
        gp = np.empty_like(p)
        gp[:, 0] = np.where(swap_x, gx2, gx1)
        gp[:, 2] = np.where(swap_x, gx1, gx2)
        gp[:, 1] = np.where(swap_y, gy2, gy1)
        gp[:, 3] = np.where(swap_y, gy1, gy2)
        return ((gp * s).reshape(pred.shape),)

    return _result(out, (pred,), bwd)


def bce_with_logits(logits, targets) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against 0/1 targets."""
    z = as_tensor(logits)
    y = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    if y.shape != z.shape:
        raise DimensionError(f"bce_with_logits: shapes {z.shape} and {y.shape} differ")
    zd = z.data
    n = float(zd.size)
    loss = np.maximum(zd, 0.0) - zd * y + np.log1p(np.exp(-np.abs(zd)))
    ex = np.exp(-np.abs(zd))
    sig = np.where(zd >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))
    return _result(np.asarray(loss.sum() / n), (z,), lambda g: ((sig - y) * g / n,))


# ---------------------------------------------------------------------------
# reverse pass


def backward(root: Tensor, tape: Tape) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every tracked leaf.

    Repeated calls accumulate; call ``zero_grad`` on leaves to reset.
    """
    if root.size != 1:
        raise ValueError(f"backward: root must be a scalar, got shape {root.shape}")
    if not root._tracked:
        raise ValueError("backward: root was not produced on the tape from tracked inputs")
    seed = np.ones_like(root.data)
    if root.requires_grad:
        root.grad = seed.copy() if root.grad is None else root.grad + seed
        return
    grads: dict[int, np.ndarray] = {id(root): seed}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        for t, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not t._tracked:
                continue
            if t.requires_grad:
                t.grad = np.array(gi, dtype=np.float64) if t.grad is None else t.grad + gi
            else:
                k = id(t)
                prev = grads.get(k)
                grads[k] = gi if prev is None else prev + gi


@dataclass
class FiniteDiffReport:
    max_rel_error: float
    tol: float
    analytic: np.ndarray = field(repr=False)
    numeric: np.ndarray = field(repr=False)

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tol)


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    tol: float = 1e-4,
    indices: Sequence[int] | None = None,
    floor: float = 1e-6,
) -> FiniteDiffReport:
    """Compare the tape gradient of scalar ``f`` at ``x`` with central differences.

    Relative error per coordinate is |a - n| / max(|a|, |n|, floor). ``indices``
    restricts the comparison to a subset of flat coordinates of ``x``.
    ``x.data`` is perturbed in place and restored.
    """
    if h <= 0:
        raise ValueError("finite_diff_check: h must be positive")
    was = x.requires_grad
    x.requires_grad = True
    x._tracked = True
    saved = x.grad
    x.grad = None
    try:
        with Tape() as tape:
            y = f(x)
        if y._tracked:
            backward(y, tape)
        analytic = np.zeros(x.size) if x.grad is None else x.grad.reshape(-1).copy()
    finally:
        x.grad = saved
        x.requires_grad = was
        x._tracked = was
    if not x.data.flags.c_contiguous:
        # reshape(-1) must be a view so perturbations reach x
        x.data = np.ascontiguousarray(x.data)
    flat = x.data.reshape(-1)
    idx = np.arange(x.size) if indices is None else np.asarray(indices, dtype=int)
    numeric = np.zeros(len(idx))
    for k, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        fp = as_tensor(f(x)).item()
        flat[i] = orig - h
        fm = as_tensor(f(x)).item()
        flat[i] = orig
        numeric[k] = (fp - fm) / (2.0 * h)
    a = analytic[idx]
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
    err = float(np.max(np.abs(a - numeric) / denom)) if len(idx) else 0.0
    return FiniteDiffReport(err, tol, a, numeric)


# ---------------------------------------------------------------------------
# flat binary format:  b"CTTENSOR" | rank u64 | extents u64... | fp64 payload (all little-endian)

TENSOR_MAGIC = b"CTTENSOR"


def dumps_tensor(t) -> bytes:
    arr = np.asarray(t.data if isinstance(t, Tensor) else t, dtype="<f8", order="C")
    head = TENSOR_MAGIC + struct.pack("<Q", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes(order="C")


def loads_tensor(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Parse one tensor from ``buf`` at ``offset``; returns (tensor, next offset)."""
    if buf[offset:offset + 8] != TENSOR_MAGIC:
        raise ValueError("not a tensor dump (bad magic)")
    offset += 8
    (rank,) = struct.unpack_from("<Q", buf, offset)
    offset += 8
    shape = struct.unpack_from(f"<{rank}Q", buf, offset)
    offset += 8 * rank
    n = int(np.prod(shape)) if rank else 1
    arr = np.frombuffer(buf, dtype="<f8", count=n, offset=offset).astype(np.float64).reshape(shape)
    return Tensor(arr), offset + 8 * n


def dump_tensor(t, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_tensor(t))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        return loads_tensor(fh.read())[0]
