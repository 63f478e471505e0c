"""Noise-prediction networks with a named feature-injection site.

A denoiser splits its forward pass at one intermediate feature ``h`` (the
injection site).  ``predict_eps_injected`` replaces ``h`` by ``h + delta_h``
before the downstream layers run, and ``vjp_injection`` returns the
gradient of ``<cotangent, eps>`` with respect to ``delta_h``.

Built-ins:

* :class:`AnalyticLinearDenoiser` -- exact score of a Gaussian image prior,
  used as an oracle.
* :class:`TinyConvDenoiser` -- a three-layer 3x3 conv net with weights drawn
  from a SplitMix64 stream, so ports in other languages reproduce it bit for
  bit.
* :class:`ConstantEpsDenoiser` -- returns a fixed noise tensor; DDIM steps
  driven by it are exact affine inverses of each other.
"""

from dataclasses import dataclass
import math

import numpy as np
from scipy import fft as sfft

from ._validation import LATENT_DTYPE, check_latent, check_timestep
from .exceptions import ConfigError, DimensionError


@dataclass(frozen=True)
class InjectionSite:
    site_id: str
    channels: int
    height: int
    width: int

    @property
    def shape(self):
        return (self.channels, self.height, self.width)


class SplitMix64:
    """SplitMix64 generator (Steele, Lea & Flood).  Pure Python, exact."""

    MASK = (1 << 64) - 1

    def __init__(self, seed):
        self.state = int(seed) & self.MASK

    def next_u64(self):
        self.state = (self.state + 0x9E3779B97F4A7C15) & self.MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & self.MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & self.MASK
        return z ^ (z >> 31)

    def uniform(self, n, low=0.0, high=1.0):
        """``n`` doubles ``low + (high - low) * (u64 >> 11) * 2**-53``."""
        scale = 2.0 ** -53
        return np.array(
            [low + (high - low) * ((self.next_u64() >> 11) * scale) for _ in range(n)],
            dtype=np.float64,
        )


def conv2d_same(x, w):
    """Zero-padded 3x3 cross-correlation; ``x`` [Cin,H,W], ``w`` [Cout,Cin,3,3]."""
    _, H, W = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    out = np.zeros((w.shape[0], H, W), dtype=np.float64)
    for dy in range(3):
        for dx in range(3):
            out += np.einsum("oi,ihw->ohw", w[:, :, dy, dx], xp[:, dy : dy + H, dx : dx + W])
    return out


def conv2d_same_adjoint(g, w):
    """Adjoint of :func:`conv2d_same` with respect to its input."""
    _, H, W = g.shape
    acc = np.zeros((w.shape[1], H + 2, W + 2), dtype=np.float64)
    for dy in range(3):
        for dx in range(3):
            acc[:, dy : dy + H, dx : dx + W] += np.einsum("oi,ohw->ihw", w[:, :, dy, dx], g)
    return acc[:, 1:-1, 1:-1]


def laplacian(x):
    """5-point Laplacian with edge replication, per channel."""
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)), mode="edge")
    return xp[:, :-2, 1:-1] + xp[:, 2:, 1:-1] + xp[:, 1:-1, :-2] + xp[:, 1:-1, 2:] - 4.0 * x


class Denoiser:
    """Base class.  Subclasses implement ``_site_feature`` and ``_head``.

    ``_head`` must be affine in its feature argument; all downstream
    computation after the site lives there.
    """

    input_shape = None
    site = None

    def __init__(self, input_shape, schedule):
        self.input_shape = tuple(int(s) for s in input_shape)
        if len(self.input_shape) != 3:
            raise DimensionError(f"input_shape must be (C, H, W), got {input_shape}")
        self.schedule = schedule

    @property
    def T(self):
        return self.schedule.T

    def _check(self, x_t, t):
        x = check_latent(x_t, "x_t", shape=self.input_shape)
        t = check_timestep(t, 0, self.T)
        return x, t

    def _check_delta(self, delta_h):
        d = np.asarray(delta_h, dtype=np.float64)
        if d.shape != self.site.shape:
            raise DimensionError(f"delta_h shape {d.shape} does not match site {self.site.site_id} {self.site.shape}")
        return d

    def site_feature(self, x_t, t):
        """Feature at the injection site, float32."""
        x, t = self._check(x_t, t)
        return self._site_feature(x, t).astype(LATENT_DTYPE)

    def predict_eps(self, x_t, t):
        """Return ``(eps, h)``: noise prediction and the captured site feature."""
        x, t = self._check(x_t, t)
        h = self._site_feature(x, t)
        eps = self._head(h + np.zeros(self.site.shape), x, t)
        return eps.astype(LATENT_DTYPE), h.astype(LATENT_DTYPE)

    def predict_eps_injected(self, x_t, t, delta_h, out_dtype=LATENT_DTYPE):
        x, t = self._check(x_t, t)
        d = self._check_delta(delta_h)
        h = self._site_feature(x, t)
        return self._head(h + d, x, t).astype(out_dtype)

    def vjp_injection(self, x_t, t, delta_h, cotangent, out_dtype=LATENT_DTYPE):
        """Gradient of ``<cotangent, eps(x_t, t; delta_h)>`` w.r.t. ``delta_h``."""
        x, t = self._check(x_t, t)
        self._check_delta(delta_h)
        cot = np.asarray(cotangent, dtype=np.float64)
        if cot.shape != self.input_shape:
            raise DimensionError(f"cotangent shape {cot.shape} != eps shape {self.input_shape}")
        # heads are affine in the site feature, so the VJP does not depend on delta_h
        return self._head_vjp(cot, x, t).astype(out_dtype)

    def get_config(self):
        raise NotImplementedError


class AnalyticLinearDenoiser(Denoiser):
    """Exact noise prediction for a Gaussian prior ``x_0 ~ N(mean, variance * S)``.

    With ``correlation_length == 0`` the prior is isotropic (``S = I``) and

        eps = sqrt(1-a) * (x - sqrt(a) mean) / (a variance + 1 - a).

    A positive ``correlation_length`` makes ``S`` a stationary smoothing
    covariance, diagonal in the orthonormal DCT-II basis with eigenvalues
    ``exp(-0.5 * l**2 * (wy**2 + wx**2))``.  The score is then a Wiener
    filter, which gives Tweedie estimates a spatial prior.

    The injection site ``"feature_bank"`` has ``2C`` channels: the filtered
    residual ``g = (a variance S + (1-a) I)^-1 (x - sqrt(a) mean)`` followed by
    its Laplacian.  The output layer reads only the first ``C`` channels,
    ``eps = sqrt(1-a) (h + delta_h)[:C]``, so a channel-mixing transfer can
    route Laplacian detail into the prediction.
    """

    def __init__(self, input_shape, schedule, mean=0.0, variance=1.0, correlation_length=0.0):
        super().__init__(input_shape, schedule)
        if not variance > 0 or not math.isfinite(variance):
            raise ConfigError(f"variance must be positive, got {variance}")
        if correlation_length < 0:
            raise ConfigError("correlation_length must be >= 0")
        mu = np.asarray(mean, dtype=np.float64)
        try:
            mu = np.broadcast_to(mu, self.input_shape).copy()
        except ValueError as exc:
            raise DimensionError(f"mean of shape {np.shape(mean)} does not broadcast to {self.input_shape}") from exc
        if not np.all(np.isfinite(mu)):
            raise ConfigError("mean must be finite")
        mu.flags.writeable = False
        self.mean = mu
        self.variance = float(variance)
        self.correlation_length = float(correlation_length)
        C, H, W = self.input_shape
        self.site = InjectionSite("feature_bank", 2 * C, H, W)
        if self.correlation_length > 0:
            wy = np.pi * np.arange(H) / H
            wx = np.pi * np.arange(W) / W
            s = np.exp(-0.5 * self.correlation_length**2 * (wy[:, None] ** 2 + wx[None, :] ** 2))
            self._spectrum = np.maximum(s, 1e-8)
        else:
            self._spectrum = None

    def _filter(self, r, t):
        a = self.schedule[t]
        if self._spectrum is None:
            return r / (a * self.variance + 1.0 - a)
        R = sfft.dctn(r, type=2, axes=(1, 2), norm="ortho")
        R /= a * self.variance * self._spectrum + 1.0 - a
        return sfft.idctn(R, type=2, axes=(1, 2), norm="ortho")

    def _site_feature(self, x, t):
        a = self.schedule[t]
        g = self._filter(x.astype(np.float64) - math.sqrt(a) * self.mean, t)
        return np.concatenate([g, laplacian(g)], axis=0)

    def _head(self, h, x, t):
        C = self.input_shape[0]
        return math.sqrt(1.0 - self.schedule[t]) * h[:C]

    def _head_vjp(self, cot, x, t):
        out = np.zeros(self.site.shape, dtype=np.float64)
        out[: self.input_shape[0]] = math.sqrt(1.0 - self.schedule[t]) * cot
        return out

    def posterior_mean(self, x_t, t):
        """``E[x_0 | x_t]`` computed directly from the prior (float64)."""
        x = np.asarray(x_t, dtype=np.float64)
        a = self.schedule[t]
        r = x - math.sqrt(a) * self.mean
        if self._spectrum is None:
            return ((1 - a) * self.mean + math.sqrt(a) * self.variance * x) / (a * self.variance + 1 - a)
        R = sfft.dctn(r, type=2, axes=(1, 2), norm="ortho")
        R *= math.sqrt(a) * self.variance * self._spectrum / (a * self.variance * self._spectrum + 1 - a)
        return self.mean + sfft.idctn(R, type=2, axes=(1, 2), norm="ortho")

    def get_config(self):
        m = self.mean
        mean = float(m.flat[0]) if np.all(m == m.flat[0]) else m.tolist()
        return {
            "kind": "analytic",
            "mean": mean,
            "variance": self.variance,
            "correlation_length": self.correlation_length,
            "site": self.site.site_id,
        }


class TinyConvDenoiser(Denoiser):
    """Three 3x3 conv layers ``C -> 8 -> 8 -> C`` with tanh after layers 1-2.

    Each layer adds ``(t / T) * temb_l`` (one scalar per output channel).
    Parameters are drawn layer by layer from one SplitMix64 stream, in the
    order ``weight[out, in, ky, kx]`` (row-major), ``bias[out]``,
    ``temb[out]``, each uniform on ``[-weight_scale, weight_scale]`` and then
    rounded to float32.  The injection site ``"post_layer2"`` is the tanh
    output of layer 2.
    """

    def __init__(self, input_shape, schedule, seed=0, width=8, weight_scale=0.2):
        super().__init__(input_shape, schedule)
        self.seed = int(seed)
        self.width = int(width)
        self.weight_scale = float(weight_scale)
        C, H, W = self.input_shape
        rng = SplitMix64(self.seed)
        self.layers = []
        for cin, cout in ((C, width), (width, width), (width, C)):
            w = rng.uniform(cout * cin * 9, -weight_scale, weight_scale).reshape(cout, cin, 3, 3)
            b = rng.uniform(cout, -weight_scale, weight_scale)
            e = rng.uniform(cout, -weight_scale, weight_scale)
            params = tuple(p.astype(np.float32).astype(np.float64) for p in (w, b, e))
            for p in params:
                p.flags.writeable = False
            self.layers.append(params)
        self.site = InjectionSite("post_layer2", width, H, W)

    def _layer(self, i, x, t):
        w, b, e = self.layers[i]
        s = t / self.T
        return conv2d_same(x, w) + (b + s * e)[:, None, None]

    def _site_feature(self, x, t):
        a1 = np.tanh(self._layer(0, x.astype(np.float64), t))
        return np.tanh(self._layer(1, a1, t))

    def _head(self, h, x, t):
        return self._layer(2, h, t)

    def _head_vjp(self, cot, x, t):
        return conv2d_same_adjoint(cot, self.layers[2][0])

    def get_config(self):
        return {
            "kind": "tinyconv",
            "seed": self.seed,
            "width": self.width,
            "weight_scale": self.weight_scale,
            "site": self.site.site_id,
        }


class ConstantEpsDenoiser(Denoiser):
    """Predicts ``eps + delta_h`` for a fixed ``eps`` regardless of input."""

    def __init__(self, input_shape, schedule, eps=0.0):
        super().__init__(input_shape, schedule)
        e = np.broadcast_to(np.asarray(eps, dtype=np.float32), self.input_shape).astype(np.float64)
        e.flags.writeable = False
        self.eps = e
        self.site = InjectionSite("identity", *self.input_shape)

    def _site_feature(self, x, t):
        return self.eps.copy()

    def _head(self, h, x, t):
        return h

    def _head_vjp(self, cot, x, t):
        return cot.copy()

    def get_config(self):
        return {"kind": "constant", "site": self.site.site_id}


DENOISER_KINDS = ("analytic", "tinyconv")


def make_denoiser(config, input_shape, schedule):
    """Build a denoiser from a job-file ``[denoiser]`` mapping."""
    cfg = dict(config or {})
    kind = cfg.pop("kind", "analytic")
    site = cfg.pop("site", None)
    try:
        if kind == "analytic":
            d = AnalyticLinearDenoiser(
                input_shape,
                schedule,
                mean=float(cfg.pop("mean", 0.5)),
                variance=float(cfg.pop("variance", 0.05)),
                correlation_length=float(cfg.pop("correlation_length", 0.0)),
            )
        elif kind == "tinyconv":
            d = TinyConvDenoiser(
                input_shape,
                schedule,
                seed=int(cfg.pop("seed", 0)),
                width=int(cfg.pop("width", 8)),
                weight_scale=float(cfg.pop("weight_scale", 0.2)),
            )
        else:
            raise ConfigError(f"unknown denoiser kind {kind!r}; expected one of {DENOISER_KINDS}")
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad denoiser parameter: {exc}") from exc
    cfg.pop("seed", None)
    if cfg:
        raise ConfigError(f"unknown denoiser keys: {sorted(cfg)}")
    if site is not None and site != d.site.site_id:
        raise ConfigError(f"denoiser {kind!r} exposes site {d.site.site_id!r}, not {site!r}")
    return d
