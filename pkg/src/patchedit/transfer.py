"""Per-timestep 1x1-convolution feature transfer.

A :class:`TransferFunction` holds one channel-mixing matrix ``W_t`` and bias
``b_t`` per timestep below the cutoff ``tau``.  At the denoiser's injection
site it produces ``delta_h = W_t h + b_t`` at every pixel; for ``t >= tau``
it produces exact zeros.

Fitting walks a reverse trajectory that starts at the low-resolution
source's noisy latent and, for each ``t < tau``, minimizes the squared
distance between the next reverse latent and the high-resolution source
trajectory.  Because denoiser heads are affine in the site feature, every
per-step objective is a convex quadratic in ``(W_t, b_t)``.
"""

from dataclasses import dataclass, field
import logging
import math

import numpy as np

from ._validation import LATENT_DTYPE, check_latent
from .exceptions import ConfigError, DimensionError, NumericDivergenceError
from .inversion import Trajectory, _schedule_of
from .schedule import ddim_reverse_step, eps_coefficient

logger = logging.getLogger(__name__)


@dataclass
class OptConfig:
    """Optimizer settings for one ``(patch, timestep)`` block.

    ``lr`` is relative: the actual step is ``lr / L`` where ``L`` is the
    largest curvature of the block's quadratic objective (found by power
    iteration on gradient differences).  Any ``lr <= max_stable_step``
    keeps the loss non-increasing without backtracking.
    """

    lr: float = 1.0
    iters: int = 100
    backtrack: bool = True
    power_iters: int = 30
    divergence_factor: float = 10.0
    constant_vector: bool = False
    max_stable_step: float = 2.0

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("transfer lr must be positive")
        if self.iters < 0:
            raise ConfigError("transfer iters must be >= 0")


@dataclass
class TransferFunction:
    weights: np.ndarray
    biases: np.ndarray
    tau: int
    patch_id: int = 0
    constant_vector: bool = False

    @classmethod
    def zeros(cls, T, channels, tau, patch_id=0, constant_vector=False):
        if not 0 <= tau <= T:
            raise ConfigError(f"tau={tau} outside [0, T={T}]")
        return cls(
            np.zeros((T + 1, channels, channels), dtype=LATENT_DTYPE),
            np.zeros((T + 1, channels), dtype=LATENT_DTYPE),
            int(tau),
            patch_id,
            constant_vector,
        )

    @property
    def channels(self):
        return self.weights.shape[1]

    @property
    def T(self):
        return self.weights.shape[0] - 1

    def active(self, t):
        return 1 <= t < self.tau

    def delta(self, h, t, W=None, b=None):
        """float64 ``W_t h + b_t``; explicit ``W``/``b`` override the stored ones."""
        h = np.asarray(h)
        if h.ndim != 3 or h.shape[0] != self.channels:
            raise DimensionError(f"feature has {h.shape[0] if h.ndim else '?'} channels, transfer expects {self.channels}")
        if not self.active(t):
            return np.zeros(h.shape, dtype=np.float64)
        W = self.weights[t] if W is None else W
        b = self.biases[t] if b is None else b
        return np.einsum("ij,jhw->ihw", np.asarray(W, np.float64), h.astype(np.float64)) + np.asarray(b, np.float64)[:, None, None]

    def copy(self):
        return TransferFunction(self.weights.copy(), self.biases.copy(), self.tau, self.patch_id, self.constant_vector)


def apply(tf, h, t):
    """``delta_h`` for feature ``h`` at timestep ``t`` (float32)."""
    return tf.delta(h, t).astype(LATENT_DTYPE)


class _StepObjective:
    """``L(W, b) = ||target - f_rev(x, t; W h + b)||^2`` evaluated in float64."""

    def __init__(self, tf, d, x_t, target, t, schedule, delta_eps=None):
        self.tf, self.d, self.t = tf, d, t
        self.x = check_latent(x_t, "x_tilde_t", shape=d.input_shape)
        self.target = check_latent(target, "target_prev", shape=d.input_shape).astype(np.float64)
        self.h = d.site_feature(self.x, t)
        a_t, a_p = schedule[t], schedule[t - 1]
        self.c = eps_coefficient(schedule, t)
        self.x_coef = math.sqrt(a_p) / math.sqrt(a_t)
        self.delta_eps = None if delta_eps is None else np.asarray(delta_eps, dtype=np.float64)

    def residual(self, W, b):
        dh = self.tf.delta(self.h, self.t, W, b)
        eps = self.d.predict_eps_injected(self.x, self.t, dh, out_dtype=np.float64)
        if self.delta_eps is not None:
            eps = eps + self.delta_eps
        return self.target - (self.x_coef * self.x.astype(np.float64) + self.c * eps), dh

    def loss(self, W, b):
        r, _ = self.residual(W, b)
        return float(np.sum(r * r))

    def loss_and_grad(self, W, b):
        r, dh = self.residual(W, b)
        g = self.d.vjp_injection(self.x, self.t, dh, -2.0 * self.c * r, out_dtype=np.float64)
        gW = np.einsum("ihw,jhw->ij", g, self.h.astype(np.float64))
        gb = g.sum(axis=(1, 2))
        if self.tf.constant_vector:
            gW = np.zeros_like(gW)
        return float(np.sum(r * r)), gW, gb

    def curvature(self, iters, seed=0):
        """Largest Hessian eigenvalue (the objective is exactly quadratic)."""
        C = self.tf.channels
        W0 = np.zeros((C, C))
        b0 = np.zeros(C)
        _, gW0, gb0 = self.loss_and_grad(W0, b0)
        rng = np.random.default_rng(seed)
        vW = np.zeros((C, C)) if self.tf.constant_vector else rng.standard_normal((C, C))
        vb = rng.standard_normal(C)
        lam = 0.0
        for _ in range(max(1, iters)):
            n = math.sqrt(np.sum(vW * vW) + np.sum(vb * vb))
            if n == 0:
                return 0.0
            vW, vb = vW / n, vb / n
            _, gW, gb = self.loss_and_grad(W0 + vW, b0 + vb)
            vW, vb = gW - gW0, gb - gb0
            lam = math.sqrt(np.sum(vW * vW) + np.sum(vb * vb))
        return lam


def max_stable_step(tf, d, x_tilde_t, target_prev, t, schedule=None, power_iters=50):
    """Absolute step ``2 / L`` beyond which plain descent can increase the loss."""
    schedule = _schedule_of(d, schedule)
    lam = _StepObjective(tf, d, x_tilde_t, target_prev, t, schedule).curvature(power_iters)
    return math.inf if lam == 0 else 2.0 / lam


def optimize_step(tf, d, x_tilde_t, target_prev, t, opt_cfg=None, schedule=None, delta_eps=None):
    """Gradient descent on ``(W_t, b_t)`` for one timestep.

    Returns ``(final_loss, tf, ledger)`` where ``ledger`` lists the loss
    before the first and after every iteration.  ``tf`` is updated in place.
    """
    opt_cfg = opt_cfg or OptConfig()
    schedule = _schedule_of(d, schedule)
    if not tf.active(t):
        raise ConfigError(f"t={t} is not below the cutoff tau={tf.tau}")
    obj = _StepObjective(tf, d, x_tilde_t, target_prev, t, schedule, delta_eps)
    W = tf.weights[t].astype(np.float64)
    b = tf.biases[t].astype(np.float64)
    loss, gW, gb = obj.loss_and_grad(W, b)
    ledger = [loss]
    if opt_cfg.iters == 0 or loss == 0.0:
        return loss, tf, ledger
    lam = obj.curvature(opt_cfg.power_iters)
    if lam == 0.0:
        return loss, tf, ledger
    step = opt_cfg.lr / lam
    initial = loss
    for _ in range(opt_cfg.iters):
        while True:
            W_new = (W - step * gW).astype(LATENT_DTYPE).astype(np.float64)
            b_new = (b - step * gb).astype(LATENT_DTYPE).astype(np.float64)
            new_loss, gW_new, gb_new = obj.loss_and_grad(W_new, b_new)
            if not math.isfinite(new_loss):
                raise NumericDivergenceError("transfer loss became non-finite; lower transfer.lr", timestep=t, patch_id=tf.patch_id, stage="transfer")
            if opt_cfg.backtrack and new_loss > loss:
                step *= 0.5
                if step * lam < 1e-12:
                    new_loss, W_new, b_new, gW_new, gb_new = loss, W, b, gW, gb
                    break
                continue
            break
        if new_loss > opt_cfg.divergence_factor * initial:
            raise NumericDivergenceError(
                f"transfer loss grew from {initial:.3e} to {new_loss:.3e}; lower transfer.lr",
                timestep=t,
                patch_id=tf.patch_id,
                stage="transfer",
            )
        W, b, loss, gW, gb = W_new, b_new, new_loss, gW_new, gb_new
        ledger.append(loss)
    tf.weights[t] = W
    tf.biases[t] = b
    return loss, tf, ledger


def inject_reverse_step(tf, d, y_t, t, schedule=None, delta_eps=None):
    """Reverse step with the frozen transfer applied to the current site feature."""
    schedule = _schedule_of(d, schedule)
    h = d.site_feature(y_t, t)
    eps = d.predict_eps_injected(y_t, t, tf.delta(h, t))
    if delta_eps is not None:
        eps = eps.astype(np.float64) + np.asarray(delta_eps, dtype=np.float64)
    return ddim_reverse_step(y_t, t, eps, schedule)


@dataclass
class TransferFit:
    transfer: TransferFunction
    trajectory: Trajectory
    ledgers: dict = field(default_factory=dict)

    @property
    def final_losses(self):
        return {t: led[-1] for t, led in self.ledgers.items()}


def fit_transfer(d, x_high_traj, x_low_traj, tau, opt_cfg=None, schedule=None, corrections=None, patch_id=0):
    """Align the reverse walk from ``x_low[T]`` with ``x_high`` for ``t < tau``.

    Steps ``T .. tau`` run with ``delta_h = 0``; steps ``tau-1 .. 1`` first
    optimize ``(W_t, b_t)`` against ``x_high[t-1]`` and then advance with the
    optimized transfer.  ``corrections`` (a :class:`CorrectionSet` for the
    low-resolution source) are added to the noise prediction at every step.
    """
    opt_cfg = opt_cfg or OptConfig()
    schedule = _schedule_of(d, schedule)
    T = schedule.T
    if x_high_traj.shape != x_low_traj.shape:
        raise DimensionError("high and low trajectories differ in shape")
    if not 0 <= tau <= T:
        raise ConfigError(f"tau={tau} outside [0, {T}]")
    tf = TransferFunction.zeros(T, d.site.channels, tau, patch_id, opt_cfg.constant_vector)
    out = np.empty_like(x_low_traj.latents)
    out[T] = x_low_traj[T]
    ledgers = {}
    for t in range(T, 0, -1):
        de = None if corrections is None else corrections[t]
        if tf.active(t):
            try:
                _, tf, ledger = optimize_step(tf, d, out[t], x_high_traj[t - 1], t, opt_cfg, schedule, de)
            except NumericDivergenceError as exc:
                exc.patch_id = patch_id
                raise
            ledgers[t] = ledger
        nxt = inject_reverse_step(tf, d, out[t], t, schedule, de)
        if not np.all(np.isfinite(nxt)):
            raise NumericDivergenceError("non-finite latent while fitting transfer", timestep=t - 1, patch_id=patch_id, stage="transfer")
        out[t - 1] = nxt
    return TransferFit(tf, Trajectory(out, "reverse", schedule.name), ledgers)


def sample_injected(tf, d, y_T, schedule=None):
    """Reverse trajectory from ``y_T`` with the transfer injected at every step."""
    schedule = _schedule_of(d, schedule)
    y = check_latent(y_T, "y_T", shape=d.input_shape)
    out = np.empty((schedule.T + 1,) + y.shape, dtype=LATENT_DTYPE)
    out[schedule.T] = y
    for t in range(schedule.T, 0, -1):
        out[t - 1] = inject_reverse_step(tf, d, out[t], t, schedule)
    return Trajectory(out, "reverse", schedule.name)
