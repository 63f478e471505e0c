"""Noise schedule and the deterministic DDIM step formulas.

Latents are stored as float32.  Every step is evaluated in float64 and
rounded once on return, so chained steps accumulate one rounding per step.
"""

from dataclasses import dataclass, field
import math

import numpy as np

from ._validation import LATENT_DTYPE, check_same_shape, check_timestep
from .exceptions import DomainError, ScheduleConfigError

ALPHA_FLOOR = 1e-5


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal-retention coefficients ``alphas[0..T]``.

    ``alphas`` is strictly decreasing, lies in ``(0, 1]`` and starts at
    (or within 1e-3 of) one.
    """

    alphas: np.ndarray
    name: str = field(default="custom", compare=False)

    def __post_init__(self):
        a = np.array(self.alphas, dtype=np.float64)
        if a.ndim != 1 or a.size < 2:
            raise ScheduleConfigError("alphas must be a 1-D sequence of length T+1 >= 2")
        if not np.all(np.isfinite(a)) or np.any(a <= 0) or np.any(a > 1):
            raise ScheduleConfigError("alphas must lie in (0, 1]")
        if np.any(np.diff(a) >= 0):
            raise ScheduleConfigError("alphas must be strictly decreasing")
        if a[0] < 0.999:
            raise ScheduleConfigError(f"alpha_0 = {a[0]} < 0.999")
        a.flags.writeable = False
        object.__setattr__(self, "alphas", a)

    @property
    def T(self):
        return self.alphas.size - 1

    def __len__(self):
        return self.alphas.size

    def __getitem__(self, t):
        return float(self.alphas[t])

    def lam(self, t, tau):
        """Time modulation ``max(0, 1 - t/tau)``; zero when ``tau == 0``."""
        if tau <= 0:
            return 0.0
        return max(0.0, 1.0 - t / tau)


def make_cosine_schedule(T, s=0.008):
    """Cosine cumulative schedule normalized to ``alpha_0 = 1``.

    >>> sch = make_cosine_schedule(4)
    >>> round(sch[2], 5)
    0.49384
    """
    if not isinstance(T, (int, np.integer)) or T < 2:
        raise ScheduleConfigError(f"T must be an integer >= 2, got {T!r}")
    if not 0 < s < 0.1:
        raise ScheduleConfigError(f"s must lie in (0, 0.1), got {s!r}")
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((t / T + s) / (1 + s)) * (math.pi / 2)) ** 2
    alphas = np.clip(f / f[0], ALPHA_FLOOR, 1.0)
    alphas[0] = 1.0
    # the floor can tie the last two entries for large T; keep strict decrease
    for i in range(T, 0, -1):
        if alphas[i] >= alphas[i - 1]:
            alphas[i - 1] = np.nextafter(alphas[i], 2.0)
    return NoiseSchedule(alphas, name=f"cosine(T={T}, s={s})")


# -- scalar-coefficient primitives ------------------------------------------


def tweedie_at(x_t, eps, alpha_t):
    x = np.asarray(x_t, dtype=np.float64)
    e = np.asarray(eps, dtype=np.float64)
    return (x - math.sqrt(1.0 - alpha_t) * e) / math.sqrt(alpha_t)


def reverse_at(x_t, eps, alpha_t, alpha_prev):
    x0 = tweedie_at(x_t, eps, alpha_t)
    out = math.sqrt(alpha_prev) * x0 + math.sqrt(1.0 - alpha_prev) * np.asarray(eps, dtype=np.float64)
    return out.astype(LATENT_DTYPE)


def forward_at(x_t, eps, alpha_t, alpha_next):
    x0 = tweedie_at(x_t, eps, alpha_t)
    out = math.sqrt(alpha_next) * x0 + math.sqrt(1.0 - alpha_next) * np.asarray(eps, dtype=np.float64)
    return out.astype(LATENT_DTYPE)


def eps_coefficient(schedule, t):
    """Sensitivity of the reverse step to its noise input.

    ``ddim_reverse_step(x, t, e + d) - ddim_reverse_step(x, t, e)`` equals
    ``eps_coefficient(schedule, t) * d`` in exact arithmetic.
    """
    a_t, a_p = schedule[t], schedule[t - 1]
    return math.sqrt(1.0 - a_p) - math.sqrt(a_p) * math.sqrt(1.0 - a_t) / math.sqrt(a_t)


# -- schedule-indexed API ---------------------------------------------------


def tweedie(x_t, t, eps, schedule):
    """Clean-image estimate ``(x_t - sqrt(1-a_t) eps) / sqrt(a_t)`` (float32)."""
    check_same_shape(x_t, eps, ("x_t", "eps"))
    if t == 0:
        raise DomainError("no Tweedie estimate at t=0")
    t = check_timestep(t, 1, schedule.T)
    return tweedie_at(x_t, eps, schedule[t]).astype(LATENT_DTYPE)


def ddim_reverse_step(x_t, t, eps, schedule):
    """One deterministic reverse step ``x_t -> x_{t-1}``."""
    check_same_shape(x_t, eps, ("x_t", "eps"))
    if t == 0:
        raise DomainError("reverse step undefined at t=0")
    t = check_timestep(t, 1, schedule.T)
    return reverse_at(x_t, eps, schedule[t], schedule[t - 1])


def ddim_forward_step(x_t, t, eps, schedule):
    """One deterministic forward (inversion) step ``x_t -> x_{t+1}``."""
    check_same_shape(x_t, eps, ("x_t", "eps"))
    t = check_timestep(t, 0, schedule.T - 1)
    return forward_at(x_t, eps, schedule[t], schedule[t + 1])
