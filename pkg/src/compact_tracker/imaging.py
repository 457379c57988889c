"""Image utilities: square crops with bilinear resampling, crop transforms, PPM/PGM I/O.

Images are ``[H, W, 3]`` float arrays in [0, 1]. Pixel ``(x, y)`` covers
``[x, x+1) x [y, y+1)`` so its center sits at ``(x + 0.5, y + 0.5)``.
Pixel-space boxes are ``(x, y, w, h)`` with ``(x, y)`` the top-left corner.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "CropTransform",
    "bilinear_sample",
    "crop_square",
    "resize",
    "write_ppm",
    "read_ppm",
    "write_pgm",
    "xywh_to_norm",
    "norm_to_xywh",
]


@dataclass(frozen=True)
class CropTransform:
    """Affine map from crop pixel coordinates to frame pixel coordinates:
    ``frame = origin + crop * scale`` per axis."""

    x0: float
    y0: float
    scale: float
    out_side: int

    def to_frame(self, u, v):
        return self.x0 + np.asarray(u) * self.scale, self.y0 + np.asarray(v) * self.scale

    def to_crop(self, x, y):
        return (np.asarray(x) - self.x0) / self.scale, (np.asarray(y) - self.y0) / self.scale

    def box_to_crop_norm(self, xywh) -> np.ndarray:
        """Frame pixel box ``(x, y, w, h)`` -> crop-normalized ``(cx, cy, w, h)``."""
        x, y, w, h = (float(v) for v in xywh)
        u, v = self.to_crop(x + w / 2, y + h / 2)
        n = self.out_side * self.scale
        return np.array([u / self.out_side, v / self.out_side, w / n, h / n])

    def box_to_frame(self, cxcywh) -> np.ndarray:
        """Crop-normalized ``(cx, cy, w, h)`` -> frame pixel box ``(x, y, w, h)``."""
        cx, cy, w, h = (float(v) for v in np.asarray(cxcywh).ravel()[:4])
        fx, fy = self.to_frame(cx * self.out_side, cy * self.out_side)
        n = self.out_side * self.scale
        fw, fh = w * n, h * n
        return np.array([float(fx) - fw / 2, float(fy) - fh / 2, fw, fh])


def _interp_matrix(coords: np.ndarray, n: int) -> np.ndarray:
    """``[len(coords), n]`` linear-interpolation weights; taps outside ``[0, n)`` are dropped."""
    f = coords - 0.5
    i0 = np.floor(f).astype(int)
    a = f - i0
    W = np.zeros((len(coords), n))
    rows = np.arange(len(coords))
    for idx, w in ((i0, 1.0 - a), (i0 + 1, a)):
        ok = (idx >= 0) & (idx < n)
        np.add.at(W, (rows[ok], idx[ok]), w[ok])
    return W


def bilinear_sample(img: np.ndarray, xs: np.ndarray, ys: np.ndarray, fill) -> np.ndarray:
    """Sample ``img`` on the grid ``ys x xs`` of continuous pixel coordinates.

    Bilinear interpolation is separable, so the result is ``Wy @ img @ Wx^T``;
    taps falling outside the image read ``fill``.
    """
    H, W, C = img.shape
    Wx = _interp_matrix(np.asarray(xs, dtype=np.float64), W)
    Wy = _interp_matrix(np.asarray(ys, dtype=np.float64), H)
    out = np.matmul(Wx, np.tensordot(Wy, img, axes=(1, 0)))
    missing = 1.0 - np.outer(Wy.sum(axis=1), Wx.sum(axis=1))
    return out + missing[..., None] * np.asarray(fill, dtype=np.float64).reshape(1, 1, C)


def crop_square(frame: np.ndarray, cx: float, cy: float, side: float, out_side: int) -> tuple[np.ndarray, CropTransform]:
    """Square crop of ``side`` pixels centered at ``(cx, cy)`` resized to ``out_side``.

    Regions outside the frame are padded with the frame's per-channel mean.
    """
    if side <= 0:
        raise ValueError("crop side must be positive")
    scale = side / out_side
    tr = CropTransform(cx - side / 2, cy - side / 2, scale, out_side)
    c = np.arange(out_side) + 0.5
    xs, ys = tr.to_frame(c, c)
    fill = frame.reshape(-1, frame.shape[-1]).mean(axis=0)
    out = bilinear_sample(frame, xs, ys, fill)
    return np.clip(out, 0.0, 1.0), tr


def resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    H, W = img.shape[:2]
    xs = np.clip((np.arange(out_w) + 0.5) * W / out_w, 0.5, W - 0.5)
    ys = np.clip((np.arange(out_h) + 0.5) * H / out_h, 0.5, H - 0.5)
    return bilinear_sample(img, xs, ys, np.zeros(img.shape[-1]))


def xywh_to_norm(xywh, width: int, height: int) -> np.ndarray:
    x, y, w, h = (float(v) for v in xywh)
    return np.array([(x + w / 2) / width, (y + h / 2) / height, w / width, h / height])


def norm_to_xywh(cxcywh, width: int, height: int) -> np.ndarray:
    cx, cy, w, h = (float(v) for v in cxcywh)
    return np.array([(cx - w / 2) * width, (cy - h / 2) * height, w * width, h * height])


def _to_bytes(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, img: np.ndarray) -> None:
    """Binary P6, 8-bit."""
    a = _to_bytes(img)
    h, w = a.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + a.tobytes())


def write_pgm(path, gray: np.ndarray) -> None:
    """Binary P5 from an array already scaled to 0..255."""
    a = np.clip(np.rint(gray), 0, 255).astype(np.uint8)
    h, w = a.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + a.tobytes())


def _read_tokens(buf: bytes, n: int) -> tuple[list[bytes], int]:
    toks, i = [], 0
    while len(toks) < n:
        while buf[i:i + 1].isspace():
            i += 1
        if buf[i:i + 1] == b"#":
            while buf[i:i + 1] not in (b"\n", b""):
                i += 1
            continue
        j = i
        while not buf[j:j + 1].isspace():
            j += 1
        toks.append(buf[i:j])
        i = j
    return toks, i + 1


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 (or P5, expanded to 3 channels) 8-bit image into [0, 1] floats."""
    buf = Path(path).read_bytes()
    (magic, w, h, mx), off = _read_tokens(buf, 4)
    w, h, mx = int(w), int(h), int(mx)
    if mx != 255 or magic not in (b"P6", b"P5"):
        raise ValueError(f"{path}: only 8-bit binary P5/P6 is supported")
    ch = 3 if magic == b"P6" else 1
    a = np.frombuffer(buf, dtype=np.uint8, count=w * h * ch, offset=off).reshape(h, w, ch)
    if ch == 1:
        a = np.repeat(a, 3, axis=2)
    return a.astype(np.float64) / 255.0


def side_for(w: float, h: float, factor: float) -> float:
    return factor * math.sqrt(w * h)
