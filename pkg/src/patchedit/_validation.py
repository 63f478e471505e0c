"""Input validation helpers shared by the estimator and the functional API."""

import numbers

import numpy as np

from .exceptions import DimensionError, DomainError, NumericDivergenceError

LATENT_DTYPE = np.float32


def check_latent(x, name="latent", shape=None, allow_nan=False, copy=False):
    """Coerce ``x`` to a float32 ``[C, H, W]`` array.

    A 2-D input is promoted to a single-channel latent.  Raises
    :class:`DimensionError` on wrong rank or mismatching ``shape`` and
    :class:`NumericDivergenceError` on NaN/Inf entries.
    """
    arr = np.array(x, dtype=LATENT_DTYPE, copy=copy) if copy else np.asarray(x, dtype=LATENT_DTYPE)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise DimensionError(f"{name} must have shape [C, H, W], got ndim={arr.ndim}")
    if shape is not None and tuple(arr.shape) != tuple(shape):
        raise DimensionError(f"{name} has shape {arr.shape}, expected {tuple(shape)}")
    if not allow_nan and not np.all(np.isfinite(arr)):
        raise NumericDivergenceError(f"{name} contains non-finite entries")
    return np.ascontiguousarray(arr)


def check_same_shape(a, b, names=("a", "b")):
    if np.shape(a) != np.shape(b):
        raise DimensionError(f"{names[0]} shape {np.shape(a)} != {names[1]} shape {np.shape(b)}")


def check_timestep(t, lo, hi, name="t"):
    if not isinstance(t, numbers.Integral) or isinstance(t, bool):
        raise DomainError(f"{name} must be an integer, got {t!r}")
    if not lo <= t <= hi:
        raise DomainError(f"{name}={t} outside [{lo}, {hi}]")
    return int(t)


def check_finite(x, message, **context):
    if not np.all(np.isfinite(x)):
        raise NumericDivergenceError(message, **context)
    return x


def check_mask(mask, hw, name="mask"):
    """Return a boolean ``[H, W]`` mask, validating dims and coverage."""
    from .exceptions import MetricError

    m = np.asarray(mask)
    if m.ndim == 3 and m.shape[0] == 1:
        m = m[0]
    if m.ndim != 2:
        raise DimensionError(f"{name} must be [H, W], got shape {m.shape}")
    if tuple(m.shape) != tuple(hw):
        raise DimensionError(f"{name} shape {m.shape} does not match image {tuple(hw)}")
    m = m > 0.5
    if not m.any():
        raise MetricError(f"{name} has no active pixels")
    return m
