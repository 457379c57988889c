"""Patch embedding and the pre-norm ViT stack over ``[cls; template(s); search]``."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .attention import ALL_STREAMS, AttentionWeights, StreamMask, attention_with_map, stream_additive_mask
from .autodiff import Tensor

__all__ = [
    "EncoderConfig",
    "PRESETS",
    "PackedSequence",
    "ViTEncoder",
    "patchify",
    "unpatchify",
    "trunc_normal",
    "transformer_block",
    "init_block",
    "block_param_count",
]


@dataclass(frozen=True)
class EncoderConfig:
    patch_size: int = 8
    d_model: int = 32
    depth: int = 2
    heads: int = 2
    mlp_ratio: int = 2
    template_side: int = 32
    search_side: int = 64

    def __post_init__(self):
        for side in (self.template_side, self.search_side):
            if side % self.patch_size:
                raise ValueError(f"image side {side} is not divisible by patch size {self.patch_size}")
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by heads {self.heads}")
        if self.depth < 0:
            raise ValueError("depth must be >= 0")

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3

    @property
    def template_grid(self) -> int:
        return self.template_side // self.patch_size

    @property
    def search_grid(self) -> int:
        return self.search_side // self.patch_size

    @property
    def template_tokens(self) -> int:
        return self.template_grid ** 2

    @property
    def search_tokens(self) -> int:
        return self.search_grid ** 2

    def token_count(self, n_templates: int = 2) -> int:
        return 1 + n_templates * self.template_tokens + self.search_tokens

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "paper-B": EncoderConfig(16, 768, 12, 12, 4, 128, 320),
    "desk": EncoderConfig(8, 32, 2, 2, 2, 32, 64),
}


def patchify(img, patch_size: int) -> np.ndarray:
    """``[..., H, W, 3]`` image(s) to ``[..., N, p*p*3]`` with patches in raster order.

    Each row is the patch's pixels in raster order, channels last.
    """
    img = np.asarray(img, dtype=np.float64)
    *lead, H, W, C = img.shape
    p = patch_size
    if H % p or W % p:
        raise ad.DimensionError(f"image {H}x{W} is not divisible by patch size {p}")
    gh, gw = H // p, W // p
    x = img.reshape(*lead, gh, p, gw, p, C)
    n = len(lead)
    x = np.moveaxis(x, n + 2, n + 1)  # [..., gh, gw, p, p, C]
    return x.reshape(*lead, gh * gw, p * p * C)


def unpatchify(patches, patch_size: int, height: int, width: int) -> np.ndarray:
    patches = np.asarray(patches, dtype=np.float64)
    *lead, N, D = patches.shape
    p = patch_size
    gh, gw = height // p, width // p
    C = D // (p * p)
    if gh * gw != N or C * p * p != D:
        raise ad.DimensionError(f"{N} patches of width {D} do not tile a {height}x{width} image")
    x = patches.reshape(*lead, gh, gw, p, p, C)
    n = len(lead)
    x = np.moveaxis(x, n + 1, n + 2)
    return x.reshape(*lead, height, width, C)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    # truncated at 2 std, by resampling
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def _param(arr, name: str) -> Tensor:
    return Tensor(arr, requires_grad=True, name=name)


def init_block(rng, prefix: str, d: int, mlp_ratio: int, init=trunc_normal) -> dict[str, Tensor]:
    hidden = d * mlp_ratio
    shapes = {
        "attn.w_q": (d, d),
        "attn.w_k": (d, d),
        "attn.w_v": (d, d),
        "attn.proj.weight": (d, d),
        "mlp.fc1.weight": (d, hidden),
        "mlp.fc2.weight": (hidden, d),
    }
    p = {f"{prefix}.{k}": _param(init(rng, s), f"{prefix}.{k}") for k, s in shapes.items()}
    for k, n in (("attn.proj.bias", d), ("mlp.fc1.bias", hidden), ("mlp.fc2.bias", d), ("norm1.bias", d), ("norm2.bias", d)):
        p[f"{prefix}.{k}"] = _param(np.zeros(n), f"{prefix}.{k}")
    for k in ("norm1.weight", "norm2.weight"):
        p[f"{prefix}.{k}"] = _param(np.ones(d), f"{prefix}.{k}")
    return p


def block_param_count(d: int, mlp_ratio: int) -> int:
    hidden = d * mlp_ratio
    return 4 * d * d + d + 2 * d * hidden + hidden + d + 4 * d


def transformer_block(params: dict, prefix: str, x: Tensor, heads: int, add_mask=None, maps: list | None = None) -> Tensor:
    """Pre-norm block: x + proj(attn(LN(x))), then x + MLP(LN(x))."""
    P = lambda k: params[f"{prefix}.{k}"]  # noqa: E731
    d = x.shape[-1]
    w = AttentionWeights(P("attn.w_q"), P("attn.w_k"), P("attn.w_v"), heads=heads, d_k=d // heads)
    h = ad.layer_norm(x, P("norm1.weight"), P("norm1.bias"))
    a, amap = attention_with_map(h, h, w, add_mask)
    if maps is not None:
        maps.append(amap.data)
    x = ad.add(x, ad.add(ad.matmul(a, P("attn.proj.weight")), P("attn.proj.bias")))
    h = ad.layer_norm(x, P("norm2.weight"), P("norm2.bias"))
    h = ad.gelu(ad.add(ad.matmul(h, P("mlp.fc1.weight")), P("mlp.fc1.bias")))
    h = ad.add(ad.matmul(h, P("mlp.fc2.weight")), P("mlp.fc2.bias"))
    return ad.add(x, h)


@dataclass
class PackedSequence:
    """Encoded ``[cls; template_1 .. template_n; search]`` tokens."""

    tokens: Tensor
    n_templates: int
    template_len: int
    search_len: int
    attention_maps: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.tokens.shape[-2] != self.total:
            raise ad.DimensionError(f"token count {self.tokens.shape[-2]} != expected {self.total}")

    @property
    def total(self) -> int:
        return 1 + self.n_templates * self.template_len + self.search_len

    @property
    def lengths(self) -> list[int]:
        return [1] + [self.template_len] * self.n_templates + [self.search_len]

    def _seg(self, start: int, stop: int) -> Tensor:
        return ad.slice_axis(self.tokens, start, stop, axis=-2)

    @property
    def cls(self) -> Tensor:
        return self._seg(0, 1)

    def template(self, i: int = 0) -> Tensor:
        start = 1 + i * self.template_len
        return self._seg(start, start + self.template_len)

    @property
    def search(self) -> Tensor:
        return self._seg(self.total - self.search_len, self.total)

    def unpack(self) -> list[Tensor]:
        return [self.cls] + [self.template(i) for i in range(self.n_templates)] + [self.search]


class ViTEncoder:
    """Patch embedding + ``depth`` pre-norm blocks with per-layer stream masks.

    Both template segments share one positional table; the search image has
    its own. The class token is never masked.
    """

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator | None = None, prefix: str = "encoder"):
        self.cfg = cfg
        self.prefix = prefix
        rng = np.random.default_rng(0) if rng is None else rng
        d = cfg.d_model
        pre = prefix
        self.params: dict[str, Tensor] = {
            f"{pre}.patch_embed.weight": _param(trunc_normal(rng, (cfg.patch_dim, d)), f"{pre}.patch_embed.weight"),
            f"{pre}.patch_embed.bias": _param(np.zeros(d), f"{pre}.patch_embed.bias"),
            f"{pre}.cls_token": _param(np.zeros(d), f"{pre}.cls_token"),
            f"{pre}.pos_template": _param(trunc_normal(rng, (cfg.template_tokens, d)), f"{pre}.pos_template"),
            f"{pre}.pos_search": _param(trunc_normal(rng, (cfg.search_tokens, d)), f"{pre}.pos_search"),
        }
        for k in range(cfg.depth):
            self.params.update(init_block(rng, f"{pre}.blocks.{k}", d, cfg.mlp_ratio))
        self.params[f"{pre}.norm.weight"] = _param(np.ones(d), f"{pre}.norm.weight")
        self.params[f"{pre}.norm.bias"] = _param(np.zeros(d), f"{pre}.norm.bias")

    def _p(self, k: str) -> Tensor:
        return self.params[f"{self.prefix}.{k}"]

    def embed(self, img, role: str) -> Tensor:
        """Linear patch projection plus the role's positional table. ``img`` is ``[..., H, W, 3]``."""
        if role not in ("template", "search"):
            raise ValueError(f"role must be 'template' or 'search', got {role!r}")
        side = self.cfg.template_side if role == "template" else self.cfg.search_side
        img = np.asarray(img, dtype=np.float64)
        if img.shape[-3:] != (side, side, 3):
            raise ad.DimensionError(f"{role} image has shape {img.shape[-3:]}, expected {(side, side, 3)}")
        patches = patchify(img, self.cfg.patch_size)
        tok = ad.add(ad.matmul(patches, self._p("patch_embed.weight")), self._p("patch_embed.bias"))
        return ad.add(tok, self._p(f"pos_{role}"))

    def encode(
        self,
        templates,
        search,
        m: StreamMask | list[StreamMask] = ALL_STREAMS,
        keep_maps: bool = False,
    ) -> PackedSequence:
        """Encode 1 or 2 templates with a search image.

        Images may carry a leading batch axis (all inputs alike). ``m`` is one
        stream mask for every layer or a list with one entry per layer.
        """
        if not 1 <= len(templates) <= 2:
            raise ValueError(f"encode takes 1 or 2 templates, got {len(templates)}")
        masks = list(m) if isinstance(m, (list, tuple)) else [m] * self.cfg.depth
        if len(masks) != self.cfg.depth:
            raise ValueError(f"{len(masks)} stream masks for depth {self.cfg.depth}")
        for sm in masks:
            sm.validate()
        zs = [self.embed(t, "template") for t in templates]
        s = self.embed(search, "search")
        lead = s.shape[:-2]
        cls = ad.reshape(ad.add(np.zeros((*lead, self.cfg.d_model)), self._p("cls_token")), (*lead, 1, self.cfg.d_model))
        x = ad.concat([cls, *zs, s], axis=-2)
        L_z = len(templates) * self.cfg.template_tokens
        maps: list | None = [] if keep_maps else None
        cache: dict[StreamMask, np.ndarray | None] = {}
        for k, sm in enumerate(masks):
            if sm not in cache:
                cache[sm] = None if sm == ALL_STREAMS else stream_additive_mask(L_z, self.cfg.search_tokens, sm, n_prefix=1)
            x = transformer_block(self.params, f"{self.prefix}.blocks.{k}", x, self.cfg.heads, cache[sm], maps)
        if self.cfg.depth:
            x = ad.layer_norm(x, self._p("norm.weight"), self._p("norm.bias"))
        return PackedSequence(x, len(templates), self.cfg.template_tokens, self.cfg.search_tokens, maps or [])

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())
