"""Input checks shared by the estimator, the tracker and the CLI."""
from __future__ import annotations

import numpy as np

__all__ = ["check_image", "check_frames", "check_xywh", "check_boxes"]


def check_image(img, name: str = "image", side: int | None = None) -> np.ndarray:
    """``[H, W, 3]`` float64 array with values in [0, 1]."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim != 3 or a.shape[-1] != 3:
        raise ValueError(f"{name}: expected shape [H, W, 3], got {a.shape}")
    if side is not None and a.shape[:2] != (side, side):
        raise ValueError(f"{name}: expected {side}x{side}, got {a.shape[0]}x{a.shape[1]}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name}: contains non-finite values")
    if a.size and (a.min() < 0.0 or a.max() > 1.0):
        raise ValueError(f"{name}: values must lie in [0, 1]")
    return a


def check_frames(frames, min_len: int = 2) -> list[np.ndarray]:
    out = [check_image(f, f"frame {i}") for i, f in enumerate(frames)]
    if len(out) < min_len:
        raise ValueError(f"need at least {min_len} frames, got {len(out)}")
    if len({f.shape for f in out}) > 1:
        raise ValueError("all frames must share one size")
    return out


def check_xywh(box, name: str = "box") -> np.ndarray:
    b = np.asarray(box, dtype=np.float64).reshape(-1)
    if b.shape != (4,) or not np.all(np.isfinite(b)):
        raise ValueError(f"{name}: expected 4 finite numbers (x y w h), got {box!r}")
    if b[2] <= 0 or b[3] <= 0:
        raise ValueError(f"{name}: width and height must be positive")
    return b


def check_boxes(boxes, n: int | None = None) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64)
    if b.ndim != 2 or b.shape[1] != 4:
        raise ValueError(f"expected an [n, 4] box array, got shape {b.shape}")
    if n is not None and len(b) != n:
        raise ValueError(f"expected {n} boxes, got {len(b)}")
    for i, row in enumerate(b):
        check_xywh(row, f"box {i}")
    return b
