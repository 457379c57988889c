"""The full network: encoder, box head, score head and the two reconstruction decoders."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attention import StreamMask
from .autodiff import Tensor
from .config import RunConfig
from .encoder import PackedSequence, ViTEncoder, patchify
from .heads import BoxHead, ScoreHead, corners_to_boxes, stage1_loss_tensor
from .masked_modeling import STREAMS, MaskedDecoder, decoder_loss, prroi_crop, sample_mask

__all__ = ["TrackerModel", "StepOutput", "save_checkpoint", "load_checkpoint", "CHECKPOINT_MAGIC"]


@dataclass
class StepOutput:
    loss: Tensor
    parts: dict
    pred_corners: np.ndarray


class TrackerModel:
    """Holds every parameter under a module-qualified name.

    Construction order (and hence initial values) is fixed per seed.
    """

    def __init__(self, cfg: RunConfig, seed: int | None = None):
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed if seed is None else seed, 7919])
        ec = cfg.encoder_config()
        self.encoder = ViTEncoder(ec, rng)
        self.box_head = BoxHead(ec.d_model, ec.search_grid, cfg.box_hidden, rng)
        self.score_head = ScoreHead(ec.d_model, cfg.score_hidden, rng)
        dc = cfg.decoder_config()
        self.self_decoder = MaskedDecoder(
            dc, ec.d_model, {"template": ec.template_tokens, "search": ec.search_tokens}, rng, prefix="self_decoder"
        )
        self.cross_decoder = MaskedDecoder(dc, ec.d_model, {"template": ec.template_tokens}, rng, prefix="cross_decoder")
        self.params: dict[str, Tensor] = {}
        for part in (self.encoder, self.box_head, self.score_head, self.self_decoder, self.cross_decoder):
            self.params.update(part.params)
        self.stream_mask = cfg.stream_mask

    # -- parameters ---------------------------------------------------------

    def named_parameters(self):
        return self.params.items()

    def param_counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for k, p in self.params.items():
            mod = k.split(".", 1)[0]
            out[mod] = out.get(mod, 0) + p.size
        out["total"] = sum(p.size for p in self.params.values())
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            missing = set(self.params) - set(arrays)
            extra = set(arrays) - set(self.params)
            raise ValueError(f"checkpoint mismatch: missing {sorted(missing)[:5]} extra {sorted(extra)[:5]}")
        for k, a in arrays.items():
            if a.shape != self.params[k].shape:
                raise ValueError(f"{k}: checkpoint shape {a.shape} != model shape {self.params[k].shape}")
            self.params[k].data[...] = a

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- forward ------------------------------------------------------------

    def encode(self, templates, search, m: StreamMask | None = None, keep_maps: bool = False) -> PackedSequence:
        return self.encoder.encode(templates, search, self.stream_mask if m is None else m, keep_maps=keep_maps)

    def predict(self, template1, template2, search) -> tuple[np.ndarray, float]:
        """Box (cx, cy, w, h in search coordinates) and score for a single triplet."""
        seq = self.encode([template1[None], template2[None]], search[None])
        corners, _ = self.box_head.corners(seq.search)
        box = corners_to_boxes(corners.data[0])[0]
        score = float(self.score_head(ad.reshape(seq.cls, (1, seq.cls.shape[-1])))[0])
        return box.as_array(), score

    def training_loss(self, batch: dict, rng: np.random.Generator, recon: tuple[str, ...] | None = None) -> StepOutput:
        """Tracking loss plus the masked-modeling term for a batch.

        ``batch`` holds ``template1``, ``template2``, ``search`` image stacks,
        ``gt`` boxes ``[B, 4]`` (search coordinates) and ``roi`` boxes ``[B, 4]``
        for the search-to-template crop. Reconstruction streams not listed in
        ``recon`` are never built, so they contribute nothing to the graph.
        """
        cfg = self.cfg
        recon = cfg.recon_list if recon is None else tuple(recon)
        ec = self.encoder.cfg
        seq = self.encode([batch["template1"], batch["template2"]], batch["search"])
        corners, _ = self.box_head.corners(seq.search)
        lam = cfg.loss_weights()
        l_dec = None
        rec_parts: dict[str, float] = {}
        if recon and lam.dec != 0.0:
            B = batch["search"].shape[0]
            tpl_patches = patchify(batch["template1"], ec.patch_size)
            outputs, targets = {}, {}
            if "t2t" in recon:
                plans = [sample_mask(ec.template_tokens, cfg.mask_ratio, rng) for _ in range(B)]
                outputs["t2t"] = self.self_decoder(seq.template(0), plans, "template", "t2t")
                targets["t2t"] = tpl_patches
            if "s2s" in recon:
                plans = [sample_mask(ec.search_tokens, cfg.mask_ratio, rng) for _ in range(B)]
                outputs["s2s"] = self.self_decoder(seq.search, plans, "search", "s2s")
                targets["s2s"] = patchify(batch["search"], ec.patch_size)
            if "s2t" in recon:
                cropped = prroi_crop(seq.search, batch["roi"], ec.template_grid)
                plans = [sample_mask(ec.template_tokens, cfg.mask_ratio, rng) for _ in range(B)]
                outputs["s2t"] = self.cross_decoder(cropped, plans, "template", "s2t")
                targets["s2t"] = tpl_patches
            l_dec, rec_parts = decoder_loss(outputs, targets, recon)
        loss, parts = stage1_loss_tensor(corners, batch["gt"], l_dec, lam)
        parts.update({f"recon_{s}": rec_parts.get(s, 0.0) for s in STREAMS})
        parts["l_dec"] = sum(rec_parts.values())
        parts["total"] = loss.item()
        return StepOutput(loss, parts, corners.data)


# ---------------------------------------------------------------------------
# checkpoints:  b"CTCKPT01" | header length u64 | JSON header | tensor dumps in header order

CHECKPOINT_MAGIC = b"CTCKPT01"


def save_checkpoint(model: TrackerModel, path, extra: dict | None = None) -> None:
    names = list(model.params)
    header = {
        "config": model.cfg.to_dict(),
        "encoder": model.encoder.cfg.to_dict(),
        "params": names,
        "extra": extra or {},
    }
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<Q", len(hb)) + hb)
        for k in names:
            fh.write(ad.dumps_tensor(model.params[k]))


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    (n,) = struct.unpack_from("<Q", buf, 8)
    header = json.loads(buf[16:16 + n])
    off = 16 + n
    arrays = {}
    for k in header["params"]:
        t, off = ad.loads_tensor(buf, off)
        arrays[k] = t.data
    return header, arrays


def load_checkpoint(path) -> tuple[TrackerModel, dict]:
    header, arrays = read_checkpoint(path)
    model = TrackerModel(RunConfig.from_dict(header["config"]))
    model.load_arrays(arrays)
    return model, header.get("extra", {})
