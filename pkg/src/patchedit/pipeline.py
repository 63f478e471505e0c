"""End-to-end patch-wise editing and procedural test assets.

A job takes three conditioning images: the high-resolution source, its
low-resolution counterpart (derived here by box downsampling), and an edited
low-resolution reference.  Per patch, the transfer is fitted so that the
low-resolution source trajectory lands on the high-resolution one; the same
transfer then steers the reference trajectory, optionally synchronized with
neighboring patches, and the patches are merged into the output.

Job files are INI documents::

    [io]          source_high, reference_low, mask (optional), output_dir
    [denoiser]    kind, plus kind-specific keys (mean, variance, seed, ...)
    [schedule]    T
    [grid]        patch_size (or patch_h / patch_w)
    [transfer]    tau, lr, iters, backtrack, constant_vector
    [sync]        enabled
    [nulltext]    enabled, mode, reference
    [parallel]    workers
    [run]         seed

Relative paths are resolved against the job file's directory.
"""

from concurrent.futures import ThreadPoolExecutor
import configparser
from dataclasses import dataclass, field, replace
import logging
import math
import os
from pathlib import Path

import numpy as np

from . import io as pio
from ._validation import LATENT_DTYPE, check_latent
from .exceptions import ConfigError, NumericDivergenceError
from .inversion import fit_corrections, invert, rms
from .metrics import format_table, masked_report, seam_score
from .patchgrid import downsample
from .sync import sync_reverse_step
from .transfer import OptConfig, fit_transfer, inject_reverse_step

logger = logging.getLogger(__name__)


class IdentityCodec:
    """Pixel-space codec; the slot where a learned autoencoder would go."""

    def encode(self, img):
        return check_latent(img, "image")

    def decode(self, latent):
        return np.asarray(latent, dtype=LATENT_DTYPE)


# -- per-patch stages ------------------------------------------------------------


@dataclass
class PatchFit:
    patch_id: int
    transfer: object
    corrections: object = None
    ledgers: dict = field(default_factory=dict)
    nulltext_residual: float = None


def fit_patch(d, src_high, src_low, tau, opt_cfg, nulltext=True, nulltext_mode="closed_form", patch_id=0):
    """Per-patch fitting: invert both sources, fit corrections and the transfer."""
    try:
        x_high = invert(d, src_high)
        x_low = invert(d, src_low)
    except NumericDivergenceError as exc:
        exc.patch_id = patch_id
        raise
    corr = None
    resid = None
    if nulltext:
        corr = fit_corrections(d, x_low, mode=nulltext_mode)
        resid = float(np.max(corr.residuals))
    fit = fit_transfer(d, x_high, x_low, tau, opt_cfg, corrections=corr, patch_id=patch_id)
    return PatchFit(patch_id, fit.transfer, corr, fit.ledgers, resid)


def sample_patches(d, fits, y_T, sync_plan=None, pool=None, use_corrections=False):
    """Injected reverse sampling of every patch with a per-step barrier.

    ``y_T`` lists the starting latents in patch order.  When ``sync_plan`` is
    given, each step whose modulation ``lam(t)`` is positive is followed by
    the synchronization step over all patches.
    """
    T = d.schedule.T
    mapper = pool.map if pool is not None else map
    ys = [np.asarray(y, dtype=LATENT_DTYPE) for y in y_T]

    def step(args):
        f, y, t = args
        de = None if (f.corrections is None or not use_corrections) else f.corrections[t]
        out = inject_reverse_step(f.transfer, d, y, t, delta_eps=de)
        if not np.all(np.isfinite(out)):
            raise NumericDivergenceError("non-finite latent while sampling", timestep=t - 1, patch_id=f.patch_id, stage="sample")
        return out

    for t in range(T, 0, -1):
        ys = list(mapper(step, [(f, y, t) for f, y in zip(fits, ys)]))
        if sync_plan is not None and sync_plan.lam(t) > 0.0:
            ys = sync_reverse_step(d, ys, sync_plan, t, timesteps=[t] * len(ys))
            for i, y in enumerate(ys):
                if not np.all(np.isfinite(y)):
                    raise NumericDivergenceError("non-finite latent after synchronization", timestep=t - 1, patch_id=i, stage="sync")
    return ys


# -- jobs --------------------------------------------------------------------


def _bool(v):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {v!r}")


def _coerce(v):
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v


@dataclass
class EditJob:
    source_high: Path
    reference_low: Path
    output_dir: Path
    mask: Path = None
    denoiser: dict = field(default_factory=lambda: {"kind": "analytic"})
    T: int = 50
    patch_h: int = 16
    patch_w: int = 16
    tau: int = 15
    sync: bool = True
    nulltext: bool = True
    nulltext_mode: str = "closed_form"
    nulltext_reference: bool = False
    opt: OptConfig = field(default_factory=OptConfig)
    workers: int = None
    seed: int = 0
    name: str = "edit"

    def __post_init__(self):
        if self.T < 2:
            raise ConfigError(f"schedule.T must be >= 2, got {self.T}")
        if not 0 <= self.tau <= self.T:
            raise ConfigError(f"transfer.tau={self.tau} must lie in [0, T={self.T}]")
        if self.patch_h <= 0 or self.patch_w <= 0:
            raise ConfigError("patch dims must be positive")
        if self.nulltext_mode not in ("closed_form", "gradient"):
            raise ConfigError(f"unknown nulltext.mode {self.nulltext_mode!r}")
        if self.workers is not None and self.workers < 1:
            raise ConfigError("parallel.workers must be >= 1")

    @classmethod
    def from_file(cls, path):
        path = Path(path)
        cp = configparser.ConfigParser()
        try:
            with open(path, encoding="utf-8") as fh:
                cp.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read job file {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"malformed job file {path}: {exc}") from exc
        sections = {s: dict(cp[s]) for s in cp.sections()}
        return cls.from_dict(sections, base_dir=path.parent, name=path.stem)

    @classmethod
    def from_dict(cls, sections, base_dir=".", name="edit"):
        known = {"io", "denoiser", "schedule", "grid", "transfer", "sync", "nulltext", "parallel", "run"}
        unknown = set(sections) - known
        if unknown:
            raise ConfigError(f"unknown job sections: {sorted(unknown)}")
        base = Path(base_dir)
        g = lambda sec: dict(sections.get(sec, {}))  # noqa: E731
        io_s = g("io")

        def req_path(key):
            if key not in io_s:
                raise ConfigError(f"job is missing io.{key}")
            return base / io_s.pop(key)

        try:
            src = req_path("source_high")
            ref = req_path("reference_low")
            out = base / io_s.pop("output_dir", f"runs/{name}")
            mask = base / io_s.pop("mask") if io_s.get("mask") else None
            io_s.pop("mask", None)
            den = {k: _coerce(v) for k, v in g("denoiser").items()}
            sched = g("schedule")
            T = int(sched.pop("t", 50))
            grid = g("grid")
            size = int(grid.pop("patch_size", 16))
            ph = int(grid.pop("patch_h", size))
            pw = int(grid.pop("patch_w", size))
            tr = g("transfer")
            tau = int(tr.pop("tau", 15))
            opt = OptConfig(
                lr=float(tr.pop("lr", 1.0)),
                iters=int(tr.pop("iters", 100)),
                backtrack=_bool(tr.pop("backtrack", True)),
                constant_vector=_bool(tr.pop("constant_vector", False)),
            )
            sy = g("sync")
            sync = _bool(sy.pop("enabled", True))
            nt = g("nulltext")
            nulltext = _bool(nt.pop("enabled", True))
            mode = nt.pop("mode", "closed_form")
            nt_ref = _bool(nt.pop("reference", False))
            par = g("parallel")
            workers = par.pop("workers", None)
            workers = None if workers is None else int(workers)
            run = g("run")
            seed = int(run.pop("seed", 0))
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad job value: {exc}") from exc
        leftovers = {k: v for k, v in dict(io=io_s, schedule=sched, grid=grid, transfer=tr, sync=sy, nulltext=nt, parallel=par, run=run).items() if v}
        if leftovers:
            raise ConfigError(f"unknown job keys: {leftovers}")
        den.setdefault("kind", "analytic")
        return cls(src, ref, out, mask, den, T, ph, pw, tau, sync, nulltext, mode, nt_ref, opt, workers, seed, name)

    def with_overrides(self, **kw):
        return replace(self, **kw)


@dataclass
class RunReport:
    output: np.ndarray
    output_dir: Path
    seam: float
    metrics: list
    ledgers: dict
    nulltext_residuals: dict
    manifest: dict

    @property
    def max_final_loss(self):
        return max((led[-1] for led in self.ledgers.values()), default=0.0)


def _denoiser_config(job):
    cfg = dict(job.denoiser)
    if cfg.get("kind") == "tinyconv":
        cfg.setdefault("seed", job.seed)
    return cfg


def run_edit(job, output_dir=None):
    """Execute a job and write its run directory; returns a :class:`RunReport`.

    Any failure is re-raised after writing ``error.txt`` (stage, patch,
    timestep) next to the partial outputs.
    """
    from .estimator import PatchEditor

    out_dir = Path(output_dir or job.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stage = "load"
    try:
        src_high = pio.read_image(job.source_high)
        ref_low = pio.read_image(job.reference_low)
        mask = None
        if job.mask is not None:
            mask = pio.read_image(job.mask)[0] > 0.5
        C, H, W = src_high.shape
        if ref_low.shape[0] != C:
            raise ConfigError(f"reference has {ref_low.shape[0]} channels, source has {C}")
        if H % ref_low.shape[1] or W % ref_low.shape[2] or H // ref_low.shape[1] != W // ref_low.shape[2]:
            raise ConfigError(f"reference {ref_low.shape[1:]} is not an integer downscale of source {(H, W)}")
        factor = H // ref_low.shape[1]
        editor = PatchEditor(
            patch_size=(job.patch_h, job.patch_w),
            factor=factor,
            denoiser=_denoiser_config(job),
            T=job.T,
            tau=job.tau,
            sync=job.sync,
            nulltext=job.nulltext,
            nulltext_mode=job.nulltext_mode,
            nulltext_reference=job.nulltext_reference,
            lr=job.opt.lr,
            iters=job.opt.iters,
            backtrack=job.opt.backtrack,
            constant_vector=job.opt.constant_vector,
            n_jobs=job.workers,
        )
        stage = "fit"
        editor.fit(src_high)
        stage = "sample"
        output = editor.transform(ref_low)
        stage = "report"
        return _write_run(job, out_dir, editor, src_high, output, mask)
    except Exception as exc:
        lines = [f"stage\t{getattr(exc, 'stage', None) or stage}", f"error\t{type(exc).__name__}: {exc}"]
        if isinstance(exc, NumericDivergenceError):
            lines += [f"patch_id\t{exc.patch_id}", f"timestep\t{exc.timestep}"]
        (out_dir / "error.txt").write_text("\n".join(lines) + "\n")
        raise


def _write_run(job, out_dir, editor, src_high, output, mask):
    for stale in ("error.txt",):
        (out_dir / stale).unlink(missing_ok=True)
    clipped = np.clip(output, 0.0, 1.0)
    clip_frac = float(np.mean(clipped != output))
    pio.write_image(clipped, out_dir / "output.ppm" if output.shape[0] == 3 else out_dir / "output.pgm", bit_depth=16)
    pio.write_tensor(output, out_dir / "output.tgd")
    tdir = out_dir / "transfer"
    tdir.mkdir(exist_ok=True)
    for f in editor.fits_:
        pio.write_tensor(f.transfer.weights, tdir / f"patch{f.patch_id:03d}_weights.tgd")
        pio.write_tensor(f.transfer.biases, tdir / f"patch{f.patch_id:03d}_biases.tgd")

    ledgers = editor.loss_ledgers_
    with open(out_dir / "losses.tsv", "w") as fh:
        fh.write("patch\tt\titer\tloss\n")
        for (p, t), led in sorted(ledgers.items(), key=lambda kv: (kv[0][0], -kv[0][1])):
            for k, v in enumerate(led):
                fh.write(f"{p}\t{t}\t{k}\t{v!r}\n")

    rows_, cols_ = editor.grid_shape_
    seam = seam_score(clipped, rows_, cols_)
    metrics = masked_report(clipped, src_high, mask)
    metrics.append(("seam", "full", seam))
    (out_dir / "metrics.tsv").write_text(format_table(metrics))

    resid = {f.patch_id: f.nulltext_residual for f in editor.fits_}
    final = {k: led[-1] for k, led in ledgers.items()}
    report = [
        f"job\t{job.name}",
        f"seed\t{job.seed}",
        f"denoiser\t{editor.denoiser_.get_config()}",
        f"T\t{job.T}",
        f"tau\t{job.tau}",
        f"sync\t{job.sync}",
        f"nulltext\t{job.nulltext}",
        f"nulltext_reference\t{job.nulltext_reference}",
        f"grid\t{rows_}x{cols_} patches of {job.patch_h}x{job.patch_w}",
        f"factor\t{editor.factor}",
        f"clipped_fraction\t{clip_frac!r}",
        f"seam_score\t{'n/a' if seam is None else repr(seam)}",
        f"max_final_transfer_loss\t{max(final.values(), default=0.0)!r}",
        f"max_nulltext_residual\t{max((v for v in resid.values() if v is not None), default=0.0)!r}",
    ]
    (out_dir / "report.txt").write_text("\n".join(report) + "\n")
    manifest = pio.write_manifest(out_dir, job.seed, {"job": job.name})
    return RunReport(output, out_dir, seam, metrics, ledgers, resid, manifest)


def ablate_sync(job, output_dir=None):
    """Run ``job`` with sync on and off; rows ``(setting, seam, psnr, ssim)``."""
    base = Path(output_dir or job.output_dir)
    rows = []
    for on in (True, False):
        rep = run_edit(job.with_overrides(sync=on), base / ("sync_on" if on else "sync_off"))
        m = {k: v for k, _, v in rep.metrics}
        rows.append(("on" if on else "off", rep.seam, m["psnr"], m["ssim"]))
    return rows


def ablate_tau(job, taus=(15, 25, 35), output_dir=None):
    """Sweep the cutoff; rows ``(tau, seam, psnr, ssim, max_final_loss)``."""
    base = Path(output_dir or job.output_dir)
    rows = []
    for tau in taus:
        if not 0 <= tau <= job.T:
            raise ConfigError(f"tau={tau} outside [0, T={job.T}]")
        rep = run_edit(job.with_overrides(tau=int(tau)), base / f"tau{tau:03d}")
        m = {k: v for k, _, v in rep.metrics}
        rows.append((int(tau), rep.seam, m["psnr"], m["ssim"], rep.max_final_loss))
    return rows


def format_rows(header, rows):
    def fmt(v):
        if v is None:
            return "n/a"
        if isinstance(v, float):
            return "inf" if math.isinf(v) else f"{v:.6g}"
        return str(v)

    return "\n".join(["\t".join(header)] + ["\t".join(fmt(v) for v in r) for r in rows]) + "\n"


# -- procedural assets ---------------------------------------------------------

FAMILIES = ("constant", "striped", "checker", "gradient-noise")
TRANSFORMS = ("identity", "hue-rotation", "pattern-substitution")

_RGB2YIQ = np.array(
    [
        [0.299, 0.587, 0.114],
        [0.595716, -0.274453, -0.321263],
        [0.211456, -0.522591, 0.311135],
    ]
)
_YIQ2RGB = np.linalg.inv(_RGB2YIQ)


@dataclass
class AssetSpec:
    family: str = "checker"
    height: int = 32
    width: int = 32
    channels: int = 3
    factor: int = 2
    seed: int = 0
    transform: str = "identity"
    hue_degrees: float = 90.0
    region: tuple = (0.25, 0.25, 0.75, 0.75)  # top, left, bottom, right as fractions

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown asset family {self.family!r}; expected one of {FAMILIES}")
        if self.transform not in TRANSFORMS:
            raise ConfigError(f"unknown edit transform {self.transform!r}; expected one of {TRANSFORMS}")
        if self.channels not in (1, 3):
            raise ConfigError("assets have 1 or 3 channels")
        if self.transform == "hue-rotation" and self.channels != 3:
            raise ConfigError("hue rotation needs 3 channels")
        if self.factor < 1 or self.height % self.factor or self.width % self.factor:
            raise ConfigError(f"factor {self.factor} does not divide {self.height}x{self.width}")


def _colors(rng, n, channels):
    return rng.uniform(0.15, 0.85, size=(n, channels))


def procedural_texture(family, height, width, channels=3, seed=0):
    """Deterministic ``[C, H, W]`` float64 texture in ``[0, 1]``."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    if family == "constant":
        c = _colors(rng, 1, channels)[0]
        return np.broadcast_to(c[:, None, None], (channels, height, width)).copy()
    if family == "striped":
        c = _colors(rng, 2, channels)
        angle = rng.uniform(0, np.pi)
        period = rng.uniform(4.0, 10.0)
        s = 0.5 + 0.5 * np.sin(2 * np.pi * (xx * np.cos(angle) + yy * np.sin(angle)) / period)
        return c[0][:, None, None] * (1 - s) + c[1][:, None, None] * s
    if family == "checker":
        c = _colors(rng, 2, channels)
        cell = int(rng.integers(3, 7))
        s = ((yy // cell + xx // cell) % 2).astype(np.float64)
        return c[0][:, None, None] * (1 - s) + c[1][:, None, None] * s
    if family == "gradient-noise":
        c = _colors(rng, 2, channels)
        g = (xx / max(width - 1, 1) + yy / max(height - 1, 1)) / 2
        coarse = rng.uniform(-1, 1, size=(channels, max(2, height // 4), max(2, width // 4)))
        noise = _bilinear(coarse, height, width)
        img = c[0][:, None, None] * (1 - g) + c[1][:, None, None] * g + 0.1 * noise
        return np.clip(img, 0.0, 1.0)
    raise ConfigError(f"unknown asset family {family!r}; expected one of {FAMILIES}")


def _bilinear(x, H, W):
    from .patchgrid import _interp_matrix

    return np.einsum("yh,chw,xw->cyx", _interp_matrix(x.shape[1], H), x, _interp_matrix(x.shape[2], W))


def hue_rotate(img, degrees):
    """Rotate chroma in YIQ space; luma is preserved exactly up to rounding.

    Pixels whose rotated color leaves the RGB cube have their chroma scaled
    toward gray just enough to fit, which also leaves luma unchanged.
    """
    x = np.asarray(img, dtype=np.float64)
    yiq = np.einsum("ij,jhw->ihw", _RGB2YIQ, x)
    th = math.radians(degrees)
    rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    iq = np.einsum("ij,jhw->ihw", rot, yiq[1:])
    luma = yiq[0]
    chroma = np.einsum("ij,jhw->ihw", _YIQ2RGB[:, 1:], iq)
    # largest s in [0, 1] with 0 <= luma + s * chroma <= 1 for every channel
    with np.errstate(divide="ignore", invalid="ignore"):
        hi = np.where(chroma > 0, (1.0 - luma) / chroma, np.inf)
        lo = np.where(chroma < 0, -luma / chroma, np.inf)
    s = np.clip(np.minimum(np.min(hi, axis=0), np.min(lo, axis=0)), 0.0, 1.0)
    return luma[None] + s[None] * chroma


def luma(img):
    return np.einsum("j,jhw->hw", _RGB2YIQ[0], np.asarray(img, dtype=np.float64))


def _region_box(spec, h, w):
    top, left, bottom, right = spec.region
    r0, r1 = int(round(top * h)), int(round(bottom * h))
    c0, c1 = int(round(left * w)), int(round(right * w))
    if not (0 <= r0 <= r1 <= h and 0 <= c0 <= c1 <= w):
        raise ConfigError(f"region {spec.region} is not inside the unit square")
    return r0, r1, c0, c1


def apply_edit(spec, low):
    """Apply ``spec.transform`` to a low-resolution image.

    Returns ``(edited, region)`` where ``region`` is a boolean ``[h, w]`` map
    of the pixels the edit may touch.
    """
    C, h, w = low.shape
    region = np.zeros((h, w), dtype=bool)
    if spec.transform == "identity":
        return low.copy(), region
    r0, r1, c0, c1 = _region_box(spec, h, w)
    region[r0:r1, c0:c1] = True
    out = low.copy()
    if spec.transform == "hue-rotation":
        rot = hue_rotate(low, spec.hue_degrees)
        out[:, region] = rot[:, region]
    else:
        alt = "striped" if spec.family != "striped" else "checker"
        sub = procedural_texture(alt, h, w, C, seed=spec.seed + 1)
        out[:, region] = sub[:, region]
    return out, region


def generate_assets(spec, out_dir):
    """Write ``source_high``, ``source_low``, ``reference_low`` and ``mask``.

    The mask marks the preserved pixels (outside the edited region) at high
    resolution; it is what masked metrics compare against the source.
    Images are 16-bit NetPBM; the low-resolution source is derived from the
    quantized high-resolution one so it matches what a job recomputes.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ext = ".ppm" if spec.channels == 3 else ".pgm"
    high = procedural_texture(spec.family, spec.height, spec.width, spec.channels, spec.seed)
    paths = {k: out / f"{k}{ext}" for k in ("source_high", "source_low", "reference_low")}
    paths["mask"] = out / "mask.pgm"
    pio.write_image(high.astype(LATENT_DTYPE), paths["source_high"], bit_depth=16)
    high_q = pio.read_image(paths["source_high"])
    low = downsample(high_q, spec.factor).astype(np.float64)
    ref, region = apply_edit(spec, low)
    pio.write_image(low.astype(LATENT_DTYPE), paths["source_low"], bit_depth=16)
    pio.write_image(ref.astype(LATENT_DTYPE), paths["reference_low"], bit_depth=16)
    keep = ~np.repeat(np.repeat(region, spec.factor, axis=0), spec.factor, axis=1)
    pio.write_image(keep[None].astype(LATENT_DTYPE), paths["mask"], bit_depth=8)
    return paths


def default_workers(n_patches, cap=None):
    cap = cap if cap is not None else (os.cpu_count() or 1)
    return max(1, min(n_patches, cap))


def make_pool(n_patches, cap=None):
    n = default_workers(n_patches, cap)
    return ThreadPoolExecutor(max_workers=n) if n > 1 else None


def reconstruction_error(d, img):
    """RMS error of a plain invert-then-reverse round trip (the identity-edit yardstick)."""
    from .inversion import reverse

    fwd = invert(d, img)
    return rms(reverse(d, fwd[d.schedule.T])[0], img)


__all__ = [
    "AssetSpec",
    "EditJob",
    "IdentityCodec",
    "PatchFit",
    "RunReport",
    "ablate_sync",
    "ablate_tau",
    "apply_edit",
    "fit_patch",
    "generate_assets",
    "hue_rotate",
    "procedural_texture",
    "run_edit",
    "sample_patches",
]
