"""DDIM inversion trajectories and per-timestep reconstruction corrections."""

from dataclasses import dataclass, field
import logging

import numpy as np

from ._validation import LATENT_DTYPE, check_latent
from .exceptions import ConfigError, NumericDivergenceError
from .schedule import ddim_forward_step, ddim_reverse_step, eps_coefficient

logger = logging.getLogger(__name__)

DEGENERATE_COEFF = 1e-8


def rms(a, b=None):
    d = np.asarray(a, dtype=np.float64)
    if b is not None:
        d = d - np.asarray(b, dtype=np.float64)
    return float(np.sqrt(np.mean(d * d)))


@dataclass
class Trajectory:
    """Latents ``x_0 .. x_T`` stacked into one ``[T+1, C, H, W]`` array.

    ``latents[t]`` always holds the latent at schedule index ``t``,
    regardless of the direction in which it was produced.
    """

    latents: np.ndarray
    direction: str = "forward"
    schedule_id: str = ""

    def __post_init__(self):
        self.latents = np.asarray(self.latents, dtype=LATENT_DTYPE)
        if self.latents.ndim != 4:
            raise ValueError("trajectory latents must be [T+1, C, H, W]")
        if self.direction not in ("forward", "reverse"):
            raise ValueError(f"unknown direction {self.direction!r}")

    @property
    def T(self):
        return self.latents.shape[0] - 1

    @property
    def shape(self):
        return self.latents.shape[1:]

    def __getitem__(self, t):
        return self.latents[t]

    def __len__(self):
        return self.latents.shape[0]


@dataclass
class CorrectionSet:
    """Per-timestep noise-space offsets ``delta_t``; ``offsets[0]`` is unused."""

    offsets: np.ndarray
    residuals: np.ndarray = field(default=None)
    converged: bool = True

    @classmethod
    def zeros(cls, T, shape):
        return cls(np.zeros((T + 1,) + tuple(shape), dtype=LATENT_DTYPE), np.zeros(T + 1))

    def __getitem__(self, t):
        return self.offsets[t]

    @property
    def T(self):
        return self.offsets.shape[0] - 1


def _schedule_of(d, schedule):
    if schedule is None:
        return d.schedule
    if schedule is not d.schedule and not np.array_equal(schedule.alphas, d.schedule.alphas):
        raise ConfigError("schedule differs from the one the denoiser was built with")
    return schedule


def invert(d, x_0, schedule=None):
    """Forward (inversion) trajectory of ``x_0`` under denoiser ``d``."""
    schedule = _schedule_of(d, schedule)
    x = check_latent(x_0, "x_0", shape=d.input_shape)
    out = np.empty((schedule.T + 1,) + x.shape, dtype=LATENT_DTYPE)
    out[0] = x
    for t in range(schedule.T):
        eps, _ = d.predict_eps(out[t], t)
        nxt = ddim_forward_step(out[t], t, eps, schedule)
        if not np.all(np.isfinite(nxt)):
            raise NumericDivergenceError("non-finite latent during inversion", timestep=t + 1, stage="invert")
        out[t + 1] = nxt
    return Trajectory(out, "forward", schedule.name)


def reverse_step(d, x_t, t, schedule=None, delta=None):
    """Plain reverse step, optionally with a noise-space correction ``delta``."""
    schedule = _schedule_of(d, schedule)
    eps, _ = d.predict_eps(x_t, t)
    if delta is not None:
        eps = eps.astype(np.float64) + np.asarray(delta, dtype=np.float64)
    return ddim_reverse_step(x_t, t, eps, schedule)


def reverse(d, x_T, schedule=None, corrections=None):
    """Reverse trajectory from ``x_T`` down to ``x_0``."""
    schedule = _schedule_of(d, schedule)
    x = check_latent(x_T, "x_T", shape=d.input_shape)
    out = np.empty((schedule.T + 1,) + x.shape, dtype=LATENT_DTYPE)
    out[schedule.T] = x
    for t in range(schedule.T, 0, -1):
        delta = None if corrections is None else corrections[t]
        nxt = reverse_step(d, out[t], t, schedule, delta)
        if not np.all(np.isfinite(nxt)):
            raise NumericDivergenceError("non-finite latent during reverse sampling", timestep=t - 1, stage="reverse")
        out[t - 1] = nxt
    return Trajectory(out, "reverse", schedule.name)


def fit_corrections(d, fwd, schedule=None, mode="closed_form", iters=50, lr=0.5, tol=1e-4):
    """Fit offsets so the reverse walk from ``fwd[T]`` retraces ``fwd``.

    The reverse step is affine in a noise-space offset with slope
    :func:`~patchedit.schedule.eps_coefficient`, so ``closed_form`` solves
    each step exactly.  ``gradient`` runs gradient descent on the same
    squared residual with step ``lr / (2 c_t**2)``, stopping early once an
    update moves the offsets by less than ``tol * 1e-3`` RMS.  Steps whose
    coefficient is below 1e-8 in magnitude are left uncorrected.  Non-convergence is logged
    and reflected in ``converged``; it never raises.
    """
    schedule = _schedule_of(d, schedule)
    if mode not in ("closed_form", "gradient"):
        raise ConfigError(f"unknown correction mode {mode!r}")
    T = schedule.T
    corr = CorrectionSet.zeros(T, fwd.shape)
    x = fwd[T].copy()
    for t in range(T, 0, -1):
        target = fwd[t - 1].astype(np.float64)
        c = eps_coefficient(schedule, t)
        eps, _ = d.predict_eps(x, t)
        if abs(c) < DEGENERATE_COEFF:
            x = ddim_reverse_step(x, t, eps, schedule)
            corr.residuals[t] = rms(x, target)
            continue
        base = ddim_reverse_step(x, t, eps, schedule).astype(np.float64)
        if mode == "closed_form":
            delta = ((target - base) / c).astype(LATENT_DTYPE)
        else:
            delta = np.zeros(fwd.shape, dtype=np.float64)
            step = lr / (2.0 * c * c)
            for _ in range(iters):
                r = target - (base + c * delta)
                update = step * (2.0 * c * r)
                delta += update
                # the error contracts by |1 - lr| per iteration, so a small update means convergence
                if rms(update) <= tol * 1e-3:
                    break
            delta = delta.astype(LATENT_DTYPE)
        corr.offsets[t] = delta
        x = reverse_step(d, x, t, schedule, delta)
        corr.residuals[t] = rms(x, target)
    bound = 1e-6 if mode == "closed_form" else tol
    bad = np.flatnonzero(corr.residuals > bound)
    if bad.size:
        corr.converged = False
        logger.warning("correction residual above %.1e at t=%s (max %.3e)", bound, bad.tolist(), corr.residuals.max())
    return corr
