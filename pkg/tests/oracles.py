"""Independent reference implementations used by the tests."""
import numpy as np
from scipy.interpolate import RegularGridInterpolator


def bilinear_field(tokens_grid):
    """Clamped bilinear interpolant of a ``[G, G, d]`` token grid in normalized coordinates."""
    G = tokens_grid.shape[0]
    c = (np.arange(G) + 0.5) / G
    if G == 1:
        return lambda xs, ys: np.broadcast_to(tokens_grid[0, 0], (*np.shape(xs), tokens_grid.shape[-1]))
    interp = RegularGridInterpolator((c, c), tokens_grid, method="linear")

    def f(xs, ys):
        xs = np.clip(xs, c[0], c[-1])
        ys = np.clip(ys, c[0], c[-1])
        return interp(np.stack([ys, xs], axis=-1))

    return f


def quadrature_roi(tokens_grid, box, out, n=1000):
    """Dense midpoint quadrature of the field over each of the ``out x out`` bins."""
    cx, cy, w, h = box
    f = bilinear_field(tokens_grid)
    res = np.zeros((out * out, tokens_grid.shape[-1]))
    for by in range(out):
        for bx in range(out):
            x0 = cx - w / 2 + bx * w / out
            y0 = cy - h / 2 + by * h / out
            xs = x0 + (np.arange(n) + 0.5) * (w / out) / n
            ys = y0 + (np.arange(n) + 0.5) * (h / out) / n
            X, Y = np.meshgrid(xs, ys)
            res[by * out + bx] = f(X.ravel(), Y.ravel()).mean(axis=0)
    return res


def mc_giou(a, b, n=1_000_000, seed=0):
    """GIoU of corner boxes via Monte-Carlo area estimates inside the hull."""
    rng = np.random.default_rng(seed)
    x1, y1 = min(a[0], b[0]), min(a[1], b[1])
    x2, y2 = max(a[2], b[2]), max(a[3], b[3])
    hull = (x2 - x1) * (y2 - y1)
    px = rng.uniform(x1, x2, n)
    py = rng.uniform(y1, y2, n)
    ina = (px >= a[0]) & (px <= a[2]) & (py >= a[1]) & (py <= a[3])
    inb = (px >= b[0]) & (px <= b[2]) & (py >= b[1]) & (py <= b[3])
    inter = (ina & inb).mean() * hull
    union = (ina | inb).mean() * hull
    return inter / union - (hull - union) / hull


def naive_auc(ious):
    total = 0.0
    for k in range(21):
        t = k / 20
        total += sum(1 for v in ious if v >= t) / len(ious)
    return total / 21
