"""Estimator-style front end.

``PatchEditor.fit`` learns the per-patch transfers from a high-resolution
source image; ``transform`` applies them to an edited low-resolution
reference and returns the high-resolution edit.
"""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import LATENT_DTYPE, check_latent
from .denoiser import make_denoiser
from .exceptions import ConfigError, DimensionError
from .inversion import invert
from .patchgrid import downsample, merge, split, upsample_to_canvas
from .pipeline import fit_patch, make_pool, sample_patches
from .schedule import make_cosine_schedule
from .sync import SyncPlan
from .transfer import OptConfig


class PatchEditor(BaseEstimator):
    """Patch-wise high-resolution editor.

    Parameters
    ----------
    patch_size : int or (int, int)
        Patch height and width at canvas resolution.
    factor : int
        Ratio between canvas and low-resolution image size.
    denoiser : str or dict
        Denoiser kind, or a full ``[denoiser]`` mapping.
    denoiser_params : dict, optional
        Extra keys merged into the denoiser mapping.
    T, tau : int
        Schedule length and transfer/sync cutoff.
    sync, nulltext : bool
        Enable patch synchronization and null-text corrections.  Corrections
        are fitted on the low-resolution source and used while fitting the
        transfers.
    nulltext_reference : bool
        Also apply the source corrections while sampling the reference.
    lr, iters, backtrack, constant_vector
        Transfer optimizer settings (see :class:`~patchedit.transfer.OptConfig`).
    n_jobs : int, optional
        Cap on worker threads across patches; defaults to the CPU count.
    """

    def __init__(
        self,
        patch_size=16,
        factor=2,
        denoiser="analytic",
        denoiser_params=None,
        T=50,
        tau=15,
        sync=True,
        nulltext=True,
        nulltext_mode="closed_form",
        nulltext_reference=False,
        lr=1.0,
        iters=100,
        backtrack=True,
        constant_vector=False,
        n_jobs=None,
    ):
        self.patch_size = patch_size
        self.factor = factor
        self.denoiser = denoiser
        self.denoiser_params = denoiser_params
        self.T = T
        self.tau = tau
        self.sync = sync
        self.nulltext = nulltext
        self.nulltext_mode = nulltext_mode
        self.nulltext_reference = nulltext_reference
        self.lr = lr
        self.iters = iters
        self.backtrack = backtrack
        self.constant_vector = constant_vector
        self.n_jobs = n_jobs

    def _patch_hw(self):
        ps = self.patch_size
        ph, pw = (ps, ps) if np.isscalar(ps) else tuple(ps)
        return int(ph), int(pw)

    def _denoiser_config(self):
        cfg = {"kind": self.denoiser} if isinstance(self.denoiser, str) else dict(self.denoiser)
        cfg.update(self.denoiser_params or {})
        return cfg

    def fit(self, X, y=None):
        """Learn transfers from the high-resolution source ``X`` ``[C, H, W]``."""
        src_high = check_latent(X, "source_high")
        if int(self.factor) < 1:
            raise ConfigError("factor must be >= 1")
        if not 0 <= self.tau <= self.T:
            raise ConfigError(f"tau={self.tau} must lie in [0, T={self.T}]")
        ph, pw = self._patch_hw()
        C, H, W = src_high.shape
        schedule = make_cosine_schedule(int(self.T))
        d = make_denoiser(self._denoiser_config(), (C, ph, pw), schedule)
        src_low = downsample(src_high, self.factor)
        hi_grid = split(src_high, ph, pw)
        lo_grid = split(upsample_to_canvas(src_low, (H, W)), ph, pw)
        opt = OptConfig(lr=self.lr, iters=self.iters, backtrack=self.backtrack, constant_vector=self.constant_vector)
        pool = make_pool(len(hi_grid), self.n_jobs)
        try:
            jobs = [(hi_grid[i], lo_grid[i], i) for i in range(len(hi_grid))]

            def work(a):
                return fit_patch(d, a[0], a[1], self.tau, opt, self.nulltext, self.nulltext_mode, a[2])

            fits = list(pool.map(work, jobs) if pool else map(work, jobs))
        finally:
            if pool:
                pool.shutdown()
        self.schedule_ = schedule
        self.denoiser_ = d
        self.canvas_shape_ = (C, H, W)
        self.grid_shape_ = (hi_grid.rows, hi_grid.cols)
        self.fits_ = fits
        self.transfers_ = [f.transfer for f in fits]
        self.loss_ledgers_ = {(f.patch_id, t): led for f in fits for t, led in f.ledgers.items()}
        return self

    def transform(self, X):
        """High-resolution edit of the low-resolution reference ``X``."""
        check_is_fitted(self, "fits_")
        ref_low = check_latent(X, "reference_low")
        C, H, W = self.canvas_shape_
        f = int(self.factor)
        if ref_low.shape != (C, H // f, W // f):
            raise DimensionError(f"reference must be {(C, H // f, W // f)}, got {ref_low.shape}")
        ph, pw = self._patch_hw()
        d = self.denoiser_
        grid = split(upsample_to_canvas(ref_low, (H, W)), ph, pw)
        plan = SyncPlan.for_grid(grid.rows, grid.cols, self.tau) if self.sync else None
        pool = make_pool(len(grid), self.n_jobs)
        try:
            mapper = pool.map if pool else map
            y_T = list(mapper(lambda p: invert(d, p)[self.T], list(grid.patches)))
            ys = sample_patches(d, self.fits_, y_T, plan, pool, use_corrections=self.nulltext_reference)
        finally:
            if pool:
                pool.shutdown()
        return merge(grid.with_patches(np.stack(ys))).astype(LATENT_DTYPE)
