"""Non-overlapping patch tiling and integer-factor resizing.

Patches are indexed row-major: patch ``i`` sits at grid row ``i // cols``
and grid column ``i % cols``.
"""

from dataclasses import dataclass

import numpy as np

from ._validation import LATENT_DTYPE, check_latent
from .exceptions import ResizeError, TilingError


@dataclass
class PatchGrid:
    rows: int
    cols: int
    patch_h: int
    patch_w: int
    patches: np.ndarray  # [rows * cols, C, patch_h, patch_w]

    def __post_init__(self):
        p = np.asarray(self.patches)
        if p.ndim != 4:
            raise TilingError(f"patches must be [N*M, C, H_d, W_d], got shape {p.shape}")
        if p.shape[0] != self.rows * self.cols:
            raise TilingError(f"{p.shape[0]} patches for a {self.rows}x{self.cols} grid")
        if p.shape[2:] != (self.patch_h, self.patch_w):
            raise TilingError(f"patch dims {p.shape[2:]} != declared ({self.patch_h}, {self.patch_w})")
        self.patches = p

    @property
    def canvas_shape(self):
        return (self.patches.shape[1], self.rows * self.patch_h, self.cols * self.patch_w)

    def __len__(self):
        return self.rows * self.cols

    def __getitem__(self, i):
        return self.patches[i]

    def position(self, i):
        return divmod(i, self.cols)

    def neighbor(self, i, side):
        """Index of the patch on ``side`` (above/below/left/right) of ``i``, else None."""
        r, c = self.position(i)
        dr, dc = {"above": (-1, 0), "below": (1, 0), "left": (0, -1), "right": (0, 1)}[side]
        r, c = r + dr, c + dc
        if 0 <= r < self.rows and 0 <= c < self.cols:
            return r * self.cols + c
        return None

    def with_patches(self, patches):
        return PatchGrid(self.rows, self.cols, self.patch_h, self.patch_w, np.asarray(patches))


def split(canvas, patch_h, patch_w=None):
    patch_w = patch_h if patch_w is None else patch_w
    x = check_latent(canvas, "canvas")
    C, H, W = x.shape
    if patch_h <= 0 or patch_w <= 0:
        raise TilingError("patch dims must be positive")
    if H % patch_h or W % patch_w:
        pad_h = (-H) % patch_h
        pad_w = (-W) % patch_w
        raise TilingError(
            f"canvas {H}x{W} is not divisible by patch {patch_h}x{patch_w}; "
            f"it would need {pad_h} rows and {pad_w} columns of padding"
        )
    N, M = H // patch_h, W // patch_w
    patches = x.reshape(C, N, patch_h, M, patch_w).transpose(1, 3, 0, 2, 4).reshape(N * M, C, patch_h, patch_w)
    return PatchGrid(N, M, patch_h, patch_w, np.ascontiguousarray(patches))


def merge(grid):
    p = np.asarray(grid.patches)
    if p.ndim != 4 or p.shape[0] != grid.rows * grid.cols or p.shape[2:] != (grid.patch_h, grid.patch_w):
        raise TilingError("patch grid is inconsistent with its declared geometry")
    N, M = grid.rows, grid.cols
    C = p.shape[1]
    canvas = p.reshape(N, M, C, grid.patch_h, grid.patch_w).transpose(2, 0, 3, 1, 4)
    return np.ascontiguousarray(canvas.reshape(C, N * grid.patch_h, M * grid.patch_w))


def _interp_matrix(n_in, n_out):
    """Corner-aligned linear interpolation weights, shape [n_out, n_in]."""
    A = np.zeros((n_out, n_in))
    if n_in == 1:
        A[:, 0] = 1.0
        return A
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    A[np.arange(n_out), lo] = 1.0 - frac
    A[np.arange(n_out), lo + 1] += frac
    return A


def _factor(n_from, n_to):
    if n_to % n_from:
        raise ResizeError(f"{n_from} -> {n_to} is not an integer scale factor")
    k = n_to // n_from
    if k < 1:
        raise ResizeError(f"scale factor must be >= 1, got {n_to}/{n_from}")
    return k


def upsample_to_canvas(img, target_hw):
    """Bilinear upsampling with corner-aligned sampling to ``target_hw``."""
    x = check_latent(img, "img")
    H, W = (int(v) for v in target_hw)
    _factor(x.shape[1], H)
    _factor(x.shape[2], W)
    if (H, W) == x.shape[1:]:
        return x.copy()
    Ay = _interp_matrix(x.shape[1], H)
    Ax = _interp_matrix(x.shape[2], W)
    out = np.einsum("yh,chw,xw->cyx", Ay, x.astype(np.float64), Ax)
    return out.astype(LATENT_DTYPE)


def downsample(img, factor):
    """``factor x factor`` box-mean reduction."""
    x = check_latent(img, "img")
    factor = int(factor)
    if factor < 1:
        raise ResizeError("downsample factor must be >= 1")
    C, H, W = x.shape
    if H % factor or W % factor:
        raise ResizeError(f"image {H}x{W} is not divisible by factor {factor}")
    if factor == 1:
        return x.copy()
    blocks = x.astype(np.float64).reshape(C, H // factor, factor, W // factor, factor)
    return blocks.mean(axis=(2, 4)).astype(LATENT_DTYPE)
