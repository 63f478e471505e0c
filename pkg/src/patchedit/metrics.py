"""Full-reference image metrics, their masked variants, and a seam score.

Images are ``[C, H, W]`` (or ``[H, W]``) arrays with peak value 1.0.
Masks are ``[H, W]`` and select the pixels (or SSIM window centers) that
take part; a full mask reproduces the unmasked value exactly.
"""

import math

import numpy as np

from ._validation import check_mask
from .exceptions import DimensionError, MetricError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3:
        raise DimensionError("images must be [C, H, W] or [H, W]")
    return a, b


def mse(a, b, mask=None):
    a, b = _pair(a, b)
    d = (a - b) ** 2
    if mask is None:
        return float(np.mean(d))
    m = check_mask(mask, a.shape[1:])
    return float(np.mean(d[:, m]))


def psnr(a, b, mask=None):
    """PSNR in dB for peak 1.0; ``math.inf`` when the images agree."""
    e = mse(a, b, mask)
    if e == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / e)


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    return g


def _filter_valid(x, g):
    """Separable 'valid' correlation of each channel with ``outer(g, g)``."""
    k = g.size
    H, W = x.shape[-2:]
    rows = sum(g[i] * x[..., i : H - k + 1 + i, :] for i in range(k))
    return sum(g[j] * rows[..., :, j : W - k + 1 + j] for j in range(k))


def ssim_map(a, b):
    """Per-window SSIM, shape ``[C, H-10, W-10]`` (window centers offset by 5)."""
    a, b = _pair(a, b)
    k = SSIM_WINDOW
    if a.shape[1] < k or a.shape[2] < k:
        raise MetricError(f"image {a.shape[1]}x{a.shape[2]} is smaller than the {k}x{k} SSIM window")
    g = gaussian_window()
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    s_aa = _filter_valid(a * a, g) - mu_a**2
    s_bb = _filter_valid(b * b, g) - mu_b**2
    s_ab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * s_ab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (s_aa + s_bb + c2)
    return num / den


def ssim(a, b, mask=None):
    """Channel-averaged SSIM; masked: mean over windows with an active center."""
    smap = ssim_map(a, b)
    if mask is None:
        return float(np.mean(smap))
    a_arr = np.asarray(a)
    m = check_mask(mask, a_arr.shape[-2:])
    r = SSIM_WINDOW // 2
    centers = m[r : m.shape[0] - r, r : m.shape[1] - r]
    if not centers.any():
        raise MetricError("mask has no active pixel at a valid SSIM window center")
    return float(np.mean(smap[:, centers]))


def seam_score(img, rows, cols):
    """Boundary-to-interior discontinuity ratio for a ``rows x cols`` tiling.

    Numerator: mean absolute difference across every pair of pixel rows
    (columns) that straddles a patch border.  Denominator: the same over all
    other adjacent pairs along the axes that have borders, floored at 1e-8.
    Returns ``None`` for a 1x1 grid.
    """
    x = np.asarray(img, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    _, H, W = x.shape
    if rows < 1 or cols < 1 or H % rows or W % cols:
        raise MetricError(f"{rows}x{cols} grid does not divide a {H}x{W} image")
    if rows == 1 and cols == 1:
        return None
    boundary, interior = [], []
    for axis, n, extent in ((1, rows, H), (2, cols, W)):
        if n == 1:
            continue
        step = extent // n
        diffs = np.abs(np.diff(x, axis=axis))
        is_border = np.zeros(extent - 1, dtype=bool)
        is_border[np.arange(1, n) * step - 1] = True
        diffs = np.moveaxis(diffs, axis, 0)
        boundary.append(diffs[is_border].ravel())
        interior.append(diffs[~is_border].ravel())
    num = float(np.mean(np.concatenate(boundary)))
    inner = np.concatenate(interior)
    den = float(np.mean(inner)) if inner.size else 0.0
    return num / max(den, 1e-8)


def masked_report(a, b, mask=None):
    """``[(metric, region, value), ...]`` in the fixed table order."""
    region = "masked" if mask is not None else "full"
    return [
        ("mse", region, mse(a, b, mask)),
        ("psnr", region, psnr(a, b, mask)),
        ("ssim", region, ssim(a, b, mask)),
    ]


def format_table(rows):
    """Tab-separated ``metric region value`` lines with a header; inf as 'inf'."""
    lines = ["metric\tregion\tvalue"]
    for metric, region, value in rows:
        if value is None:
            v = "n/a"
        elif isinstance(value, float) and math.isinf(value):
            v = "inf"
        else:
            v = repr(float(value))
        lines.append(f"{metric}\t{region}\t{v}")
    return "\n".join(lines) + "\n"
