"""Blended-Tweedie synchronization of adjacent patches.

For a vertical pair ``(i, j)`` (``j`` below ``i``) the auxiliary latent is
the bottom half of ``i`` stacked on the top half of ``j``.  Patch ``i``
blends its own clean-image estimate with the aux estimate shifted down by
half a patch (operator ``T1``) under a ramp ``M1`` that rises from 0 at its
middle row; patch ``j`` uses the mirrored pair ``T2``/``M2`` on its top
half.  Horizontal pairs are the transpose.  The ramp is scaled by
``lam(t) = max(0, 1 - t / tau)``.

All estimates at one timestep come from the pre-update latents (Jacobi
order).  A patch with several neighbors applies the vertical blends first,
then the horizontal ones.
"""

from dataclasses import dataclass, field
import math

import numpy as np

from ._validation import LATENT_DTYPE, check_same_shape
from .exceptions import DimensionError, GeometryError, SyncBarrierError
from .inversion import _schedule_of
from .schedule import ddim_forward_step, tweedie_at

VERTICAL = "vertical"
HORIZONTAL = "horizontal"
FIRST = "first"
SECOND = "second"


def _axis(orientation):
    if orientation == VERTICAL:
        return 1
    if orientation == HORIZONTAL:
        return 2
    raise ValueError(f"unknown orientation {orientation!r}")


def _half(n, orientation):
    if n % 2:
        raise GeometryError(f"{orientation} patch extent {n} is odd; halves must be integral")
    return n // 2


def ramp_weight(v, extent, side):
    """Ramp value at coordinate ``v`` along an axis of length ``extent``."""
    half = extent / 2
    if side == FIRST:
        return 0.0 if v < half else (v - half) / half
    if side == SECOND:
        return (half - v) / half if v <= half else 0.0
    raise ValueError(f"unknown side {side!r}")


@dataclass(frozen=True)
class RampMask:
    orientation: str
    height: int
    width: int
    side: str

    @property
    def values(self):
        """``[H, W]`` float64 weights in ``[0, 1]``."""
        extent = self.height if self.orientation == VERTICAL else self.width
        _half(extent, self.orientation)
        ramp = np.array([ramp_weight(v, extent, self.side) for v in range(extent)])
        if self.orientation == VERTICAL:
            return np.repeat(ramp[:, None], self.width, axis=1)
        return np.repeat(ramp[None, :], self.height, axis=0)

    @property
    def operator(self):
        return "T1" if self.side == FIRST else "T2"


def make_aux_latent(y_i, y_j, orientation=VERTICAL):
    """Latent straddling the shared border of ``y_i`` and its successor ``y_j``."""
    check_same_shape(y_i, y_j, ("y_i", "y_j"))
    ax = _axis(orientation)
    h = _half(np.shape(y_i)[ax], orientation)
    a = np.take(y_i, range(h, 2 * h), axis=ax)
    b = np.take(y_j, range(0, h), axis=ax)
    return np.concatenate([a, b], axis=ax)


def translate(f, operator, orientation=VERTICAL):
    """Half-patch shift with zero fill: ``T1`` moves content forward, ``T2`` back."""
    f = np.asarray(f)
    ax = _axis(orientation)
    h = _half(f.shape[ax], orientation)
    out = np.zeros_like(f)
    src = [slice(None)] * f.ndim
    dst = [slice(None)] * f.ndim
    if operator == "T1":
        src[ax], dst[ax] = slice(0, h), slice(h, 2 * h)
    elif operator == "T2":
        src[ax], dst[ax] = slice(h, 2 * h), slice(0, h)
    else:
        raise ValueError(f"unknown operator {operator!r}")
    out[tuple(dst)] = f[tuple(src)]
    return out


def blend_tweedie(x0_self, x0_aux, mask, lam):
    """``(1 - lam M) x0_self + lam M (T x0_aux)`` evaluated as ``x + lam M (T a - x)``.

    The incremental form returns ``x0_self`` bit-for-bit wherever the
    effective weight is zero or the two estimates already agree.
    """
    check_same_shape(x0_self, x0_aux, ("x0_self", "x0_aux"))
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lam must lie in [0, 1], got {lam}")
    x = np.asarray(x0_self, dtype=np.float64)
    if np.shape(x)[1:] != (mask.height, mask.width):
        raise DimensionError(f"mask {mask.height}x{mask.width} does not match estimate {x.shape[1:]}")
    if lam == 0.0:
        return x.copy()
    shifted = translate(np.asarray(x0_aux, dtype=np.float64), mask.operator, mask.orientation)
    w = lam * mask.values
    return x + w[None] * (shifted - x)


@dataclass
class SyncPlan:
    """Adjacency of a patch grid plus the time modulation cutoff ``tau``.

    ``edges`` holds ``(i, j, orientation)`` with ``j`` below (vertical) or
    to the right of (horizontal) ``i``; every interior edge appears once.
    """

    rows: int
    cols: int
    tau: int
    edges: list = field(default_factory=list)

    @classmethod
    def for_grid(cls, rows, cols, tau):
        edges = []
        for r in range(rows):
            for c in range(cols):
                i = r * cols + c
                if r + 1 < rows:
                    edges.append((i, i + cols, VERTICAL))
                if c + 1 < cols:
                    edges.append((i, i + 1, HORIZONTAL))
        return cls(rows, cols, tau, edges)

    def lam(self, t):
        if self.tau <= 0:
            return 0.0
        return max(0.0, 1.0 - t / self.tau)

    def neighbors(self, i):
        return [e for e in self.edges if i in (e[0], e[1])]


def resample_forward(d, y_prev, t, schedule=None):
    """Plain forward step ``t-1 -> t`` of a detail-injected latent (no transfer)."""
    schedule = _schedule_of(d, schedule)
    eps, _ = d.predict_eps(y_prev, t - 1)
    return ddim_forward_step(y_prev, t - 1, eps, schedule)


def sync_reverse_step(d, injected, plan, t, schedule=None, timesteps=None):
    """Synchronize the patch outputs of one injected reverse step ``t -> t-1``.

    ``injected[i]`` is patch ``i`` after the transfer-injected reverse step.
    Each is resampled back to ``t``, clean-image estimates of the resampled
    patches and of every auxiliary latent are blended, and the step is
    redone from the blended estimate.  With ``lam(t) == 0``, and for
    patches without neighbors, ``injected[i]`` is returned unchanged.
    """
    schedule = _schedule_of(d, schedule)
    if timesteps is not None and any(s != t for s in timesteps):
        raise SyncBarrierError(f"patches are at timesteps {sorted(set(timesteps))}, expected all at t={t}")
    n = len(injected)
    if n != plan.rows * plan.cols:
        raise DimensionError(f"{n} patch states for a {plan.rows}x{plan.cols} plan")
    lam = plan.lam(t)
    out = [np.asarray(y) for y in injected]
    if lam == 0.0 or not plan.edges:
        return out
    a_t, a_p = schedule[t], schedule[t - 1]
    rsp = [resample_forward(d, y, t, schedule) for y in injected]
    eps = []
    x0 = []
    for y in rsp:
        e, _ = d.predict_eps(y, t)
        eps.append(e)
        x0.append(tweedie_at(y, e, a_t))
    aux = {}
    for i, j, orient in plan.edges:
        A = make_aux_latent(rsp[i], rsp[j], orient)
        e, _ = d.predict_eps(A, t)
        aux[(i, j)] = tweedie_at(A, e, a_t)
    _, H, W = rsp[0].shape
    for i in range(n):
        mine = plan.neighbors(i)
        if not mine:
            continue
        L = x0[i]
        for orient in (VERTICAL, HORIZONTAL):
            for a, b, o in mine:
                if o != orient:
                    continue
                side = FIRST if a == i else SECOND
                L = blend_tweedie(L, aux[(a, b)], RampMask(orient, H, W, side), lam)
        y = math.sqrt(a_p) * L + math.sqrt(1.0 - a_p) * eps[i].astype(np.float64)
        out[i] = y.astype(LATENT_DTYPE)
    return out
