"""Central finite-difference checks for every differentiable op and the stage-1 loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, finite_diff_check

__all__ = ["GradCase", "GradResult", "op_cases", "gradient_suite"]


@dataclass
class GradCase:
    name: str
    shape: tuple
    fn: object  # Tensor -> scalar Tensor
    x: np.ndarray
    indices: np.ndarray | None = None


@dataclass
class GradResult:
    name: str
    shape: tuple
    max_rel_error: float
    passed: bool

    def to_dict(self) -> dict:
        return {"name": self.name, "shape": list(self.shape), "max_rel_error": self.max_rel_error, "passed": self.passed}


def _head(rng, shape):
    """Random linear functional that turns an op output into a scalar."""
    R = rng.normal(size=shape)
    return lambda y: ad.tsum(ad.mul(y, R))


def _boxes(rng, n):
    lo = rng.uniform(0.0, 0.5, size=(n, 2))
    wh = rng.uniform(0.2, 0.5, size=(n, 2))
    return np.concatenate([lo, lo + wh], axis=1)


def op_cases(seed: int = 0) -> list[GradCase]:
    """Three or more shapes per op; each case is scalar in a single input tensor."""
    rng = np.random.default_rng(seed)
    N = rng.normal
    cases: list[GradCase] = []

    def add(name, shape, fn, x=None):
        cases.append(GradCase(name, tuple(shape), fn, N(size=shape) if x is None else x))

    for sa, sb in (((3, 4), (4, 2)), ((2, 3, 5), (2, 5, 4)), ((2, 2, 3, 4), (4, 3))):
        B = N(size=sb)
        A = N(size=sa)
        out_shape = np.matmul(N(size=sa), B).shape
        h = _head(rng, out_shape)
        add("matmul[a]", sa, lambda x, B=B, h=h: h(ad.matmul(x, B)))
        add("matmul[b]", sb, lambda x, A=A, h=h: h(ad.matmul(A, x)))
    for sa, sb in (((4,), (4,)), ((3, 4), (4,)), ((2, 3, 4), (3, 4))):
        other = Tensor(N(size=sb))
        h = _head(rng, sa)
        add("add", sa, lambda x, o=other, h=h: h(ad.add(x, o)))
        add("sub", sa, lambda x, o=other, h=h: h(ad.sub(x, o)))
        add("mul", sa, lambda x, o=other, h=h: h(ad.mul(x, o)))
        hb = _head(rng, sa)
        A = Tensor(N(size=sa))
        add("add[broadcast operand]", sb, lambda x, A=A, h=hb: h(ad.add(A, x)))
        add("mul[broadcast operand]", sb, lambda x, A=A, h=hb: h(ad.mul(A, x)))
    for s in ((5,), (3, 4), (2, 3, 6)):
        h = _head(rng, s)
        add("scale", s, lambda x, h=h: h(ad.scale(x, -1.7)))
        add("gelu", s, lambda x, h=h: h(ad.gelu(x)))
        add("sigmoid", s, lambda x, h=h: h(ad.sigmoid(x)))
        mask = np.where(rng.uniform(size=s) < 0.3, -np.inf, 0.0)
        mask[..., 0] = 0.0
        add("masked_softmax", s, lambda x, h=h, m=mask: h(ad.masked_softmax(x, m)))
        add("tsum", s, lambda x: ad.tsum(ad.mul(x, x)))
        add("mean[axis=-1]", s, lambda x, h=_head(rng, s[:-1]): h(ad.mean(x, axis=-1)) if len(s) > 1 else ad.mean(x, axis=-1))
        g, b = N(size=s[-1]), N(size=s[-1])
        add("layer_norm[x]", s, lambda x, h=h, g=g, b=b: h(ad.layer_norm(x, g, b)))
        X = N(size=s)
        add("layer_norm[gain]", (s[-1],), lambda x, h=h, X=X, b=b: h(ad.layer_norm(X, x, b)), g.copy())
        add("layer_norm[bias]", (s[-1],), lambda x, h=h, X=X, g=g: h(ad.layer_norm(X, g, x)), b.copy())
        T = N(size=s)
        W = rng.uniform(size=s) * (rng.uniform(size=s) < 0.5)
        add("mse", s, lambda x, T=T: ad.mse(x, T))
        add("mse[weighted]", s, lambda x, T=T, W=W: ad.mse(x, T, weight=W))
        # keep |x - T| away from the kink
        add("l1", s, lambda x, T=T: ad.l1(x, T), T + np.sign(N(size=s)) * rng.uniform(0.1, 1.0, size=s))
        y = (rng.uniform(size=s) < 0.5).astype(float)
        add("bce_with_logits", s, lambda x, y=y: ad.bce_with_logits(x, y))
    for s in ((4, 3), (2, 4, 3), (3, 2, 4)):
        other = N(size=s)
        h = _head(rng, (*s[:-1], s[-1] * 2))
        add("concat", s, lambda x, o=other, h=h: h(ad.concat([x, o], axis=-1)))
        hs = _head(rng, (*s[:-1], 2))
        add("slice_axis", s, lambda x, hs=hs: hs(ad.slice_axis(x, 1, 3, axis=-1)))
        hr = _head(rng, (int(np.prod(s)),))
        add("reshape", s, lambda x, hr=hr: hr(ad.reshape(x, (-1,))))
        ht = _head(rng, tuple(reversed(s)))
        add("transpose", s, lambda x, ht=ht, r=tuple(reversed(range(len(s)))): ht(ad.transpose(x, r)))
    for n in (1, 3, 6):
        gt = _boxes(rng, n)
        pred = _boxes(rng, n)
        add("giou_loss", (n, 4), lambda x, gt=gt: ad.giou_loss(x, gt), pred)
    # swapped corners route gradients through the canonical order
    gt = _boxes(rng, 2)
    pred = _boxes(rng, 2)[:, [2, 1, 0, 3]]
    add("giou_loss[inverted corners]", (2, 4), lambda x, gt=gt: ad.giou_loss(x, gt), pred)
    cases.extend(_module_cases(rng))
    return cases


def _module_cases(rng) -> list[GradCase]:
    from .attention import AttentionWeights, SegmentedInput, StreamMask, stream_masked_attention
    from .masked_modeling import prroi_crop

    out = []
    for L_z, L_s, d, heads, m in ((2, 3, 4, 1, "1234"), (3, 5, 8, 2, "134"), (4, 2, 8, 4, "23")):
        w = AttentionWeights.random(d, heads, d // heads, rng)
        Xs = rng.normal(size=(L_s, d))
        h = _head(rng, (L_z + L_s, d))
        mask = StreamMask.parse(m)
        out.append(GradCase(
            f"stream_masked_attention[{m}]", (L_z, d),
            lambda x, Xs=Xs, w=w, h=h, mask=mask: h(stream_masked_attention(SegmentedInput(x, Tensor(Xs)), w, mask)),
            rng.normal(size=(L_z, d)),
        ))
    for G, d, o, box in ((4, 3, 2, (0.5, 0.5, 0.6, 0.4)), (6, 2, 3, (0.3, 0.6, 0.35, 0.5)), (8, 4, 4, (0.55, 0.45, 0.9, 0.8))):
        h = _head(rng, (o * o, d))
        out.append(GradCase(
            "prroi_crop", (G * G, d), lambda x, h=h, box=box, o=o: h(prroi_crop(x, box, o)), rng.normal(size=(G * G, d))
        ))
    return out


def _stage1_cases(seed: int, per_param: int) -> list[GradCase]:
    from .config import RunConfig
    from .model import TrackerModel
    from .training import make_batch

    rng = np.random.default_rng([seed, 5])
    cases = []
    shapes = ((8, 16, 32, 1), (8, 16, 32, 2), (8, 16, 24, 1))
    for patch, tpl, srch, depth in shapes:
        cfg = RunConfig(
            patch_size=patch, d_model=8, depth=depth, heads=2, mlp_ratio=2, template_side=tpl, search_side=srch,
            dec_dim=8, dec_heads=2, box_hidden=6, score_hidden=6, batch_size=2, seed=seed,
        )
        model = TrackerModel(cfg, seed)
        batch = make_batch(cfg, 0, seed)

        def f(_x, model=model, batch=batch):
            return model.training_loss(batch, np.random.default_rng(seed)).loss

        names = list(model.params)
        for k in names:
            if k.startswith("score_head."):
                continue
            p = model.params[k]
            idx = np.sort(rng.choice(p.size, size=min(per_param, p.size), replace=False))
            cases.append(GradCase(f"stage1_loss[{k}]", (patch, tpl, srch, depth), f, p, idx))
    return cases


def gradient_suite(seed: int = 0, tol: float = 1e-4, h: float = 1e-5, stage1: bool = True, per_param: int = 2) -> list[GradResult]:
    """Run every case; ``stage1`` adds the full loss graph on three small configs."""
    cases = op_cases(seed)
    if stage1:
        cases += _stage1_cases(seed, per_param)
    results = []
    for c in cases:
        x = c.x if isinstance(c.x, Tensor) else Tensor(np.array(c.x, dtype=np.float64))
        rep = finite_diff_check(c.fn, x, h=h, tol=tol, indices=c.indices)
        results.append(GradResult(c.name, c.shape, float(rep.max_rel_error), bool(rep.passed)))
    return results
