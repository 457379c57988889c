"""Flat run configuration with shipped presets."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from importlib import resources
from pathlib import Path

from .attention import StreamMask
from .data import CropConfig, SyntheticSequenceConfig
from .encoder import EncoderConfig
from .heads import LossWeights
from .masked_modeling import STREAMS, DecoderConfig
from .optim import ScheduleConfig

__all__ = ["RunConfig", "load_preset", "PRESET_NAMES"]

PRESET_NAMES = ("desk", "paper-B")


@dataclass(frozen=True)
class RunConfig:
    preset: str = "desk"
    # encoder
    patch_size: int = 8
    d_model: int = 32
    depth: int = 2
    heads: int = 2
    mlp_ratio: int = 2
    template_side: int = 32
    search_side: int = 64
    streams: str = "1234"
    # decoders
    dec_depth: int = 1
    dec_dim: int = 32
    dec_heads: int = 2
    dec_mlp_ratio: int = 4
    mask_ratio: float = 0.75
    recon_streams: str = "t2t,s2s,s2t"
    # heads
    box_hidden: int = 32
    score_hidden: int = 32
    # loss
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0
    lambda_dec: float = 0.3
    # optimization
    base_lr: float = 3e-3
    warmup_epochs: float = 5
    warmup_factor: float = 0.2
    final_factor: float = 0.1
    total_epochs: float = 50
    layer_decay: float = 0.75
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    batch_size: int = 16
    steps: int = 2000
    stage2_steps: int = 1000
    stage2_lr: float = 1e-2
    stage2_samples: int = 1600
    negative_fraction: float = 0.5
    # data
    frame_size: int = 128
    target_min: int = 10
    target_max: int = 18
    motion_sigma: float = 1.5
    size_jitter: float = 0.02
    seq_length: int = 30
    template_factor: float = 2.0
    search_factor: float = 5.0
    center_jitter: float = 0.5
    crop_scale_jitter: float = 0.15
    brightness_low: float = 0.8
    brightness_high: float = 1.2
    flip_prob: float = 0.5
    # tracking
    score_threshold: float = 0.5
    update_interval: int = 25
    update_mode: str = "score"
    precision_fraction: float = 0.05
    eval_sequences: int = 8
    eval_length: int = 40
    seed: int = 0

    def __post_init__(self):
        StreamMask.parse(self.streams).validate()
        bad = set(self.recon_list) - set(STREAMS)
        if bad:
            raise ValueError(f"unknown reconstruction streams {sorted(bad)}")
        if self.update_mode not in ("none", "interval", "score"):
            raise ValueError(f"update_mode must be none|interval|score, got {self.update_mode!r}")

    # -- construction ------------------------------------------------------

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        if "preset" in d and d["preset"] not in PRESET_NAMES:
            raise ValueError(f"unknown preset {d['preset']!r}")
        types = {f.name: f.type for f in fields(cls)}
        clean = {}
        for k, v in d.items():
            t = types[k]
            if t in ("int", int) and isinstance(v, float) and v.is_integer():
                v = int(v)
            if t in ("str", str) and isinstance(v, (list, tuple)):
                v = ",".join(v) if k == "recon_streams" else "".join(str(x) for x in v)
            clean[k] = v
        return cls(**clean)

    def override(self, **kw) -> "RunConfig":
        d = self.to_dict()
        d.update(kw)
        return RunConfig.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    # -- typed views -------------------------------------------------------

    @property
    def recon_list(self) -> tuple[str, ...]:
        return tuple(s for s in (x.strip() for x in self.recon_streams.split(",")) if s)

    @property
    def stream_mask(self) -> StreamMask:
        return StreamMask.parse(self.streams)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.patch_size, self.d_model, self.depth, self.heads, self.mlp_ratio, self.template_side, self.search_side)

    def decoder_config(self) -> DecoderConfig:
        return DecoderConfig(self.dec_depth, self.dec_dim, self.dec_heads, self.patch_size ** 2 * 3, self.dec_mlp_ratio)

    def schedule(self) -> ScheduleConfig:
        return ScheduleConfig(self.base_lr, self.warmup_epochs, self.warmup_factor, self.final_factor, self.total_epochs, self.layer_decay)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_l1, self.lambda_giou, self.lambda_dec)

    def sequence_config(self, length: int | None = None) -> SyntheticSequenceConfig:
        return SyntheticSequenceConfig(
            self.frame_size, self.target_min, self.target_max, self.motion_sigma, self.size_jitter,
            length or self.seq_length, self.seed,
        )

    def crop_config(self) -> CropConfig:
        return CropConfig(self.template_side, self.search_side, self.template_factor, self.search_factor, self.center_jitter, self.crop_scale_jitter)


def load_preset(name: str) -> RunConfig:
    if name not in PRESET_NAMES:
        raise ValueError(f"unknown preset {name!r}; choose from {PRESET_NAMES}")
    text = resources.files("compact_tracker").joinpath("presets", f"{name}.json").read_text()
    return RunConfig.from_dict(json.loads(text))
