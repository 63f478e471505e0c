"""Patch-wise high-resolution image editing by test-time trajectory alignment.

The diffusion machinery runs on small pixel-space denoisers with analytic
oracles, so every stage can be checked numerically without model weights.
"""

from .denoiser import AnalyticLinearDenoiser, ConstantEpsDenoiser, TinyConvDenoiser, make_denoiser
from .estimator import PatchEditor
from .exceptions import (
    ConfigError,
    DimensionError,
    DomainError,
    GeometryError,
    MetricError,
    NumericDivergenceError,
    ParseError,
    PatchEditError,
    ResizeError,
    ScheduleConfigError,
    SyncBarrierError,
    TilingError,
)
from .io import read_image, write_image
from .inversion import CorrectionSet, Trajectory, fit_corrections, invert, reverse
from .metrics import mse, psnr, seam_score, ssim
from .patchgrid import PatchGrid, downsample, merge, split, upsample_to_canvas
from .pipeline import AssetSpec, EditJob, RunReport, generate_assets, run_edit
from .schedule import NoiseSchedule, ddim_forward_step, ddim_reverse_step, make_cosine_schedule, tweedie
from .sync import RampMask, SyncPlan, sync_reverse_step
from .transfer import OptConfig, TransferFunction, fit_transfer, inject_reverse_step, optimize_step

__version__ = "0.1.0"

__all__ = [
    "AnalyticLinearDenoiser",
    "AssetSpec",
    "ConfigError",
    "ConstantEpsDenoiser",
    "CorrectionSet",
    "DimensionError",
    "DomainError",
    "EditJob",
    "GeometryError",
    "MetricError",
    "NoiseSchedule",
    "NumericDivergenceError",
    "OptConfig",
    "ParseError",
    "PatchEditError",
    "PatchEditor",
    "PatchGrid",
    "RampMask",
    "ResizeError",
    "RunReport",
    "ScheduleConfigError",
    "SyncBarrierError",
    "SyncPlan",
    "TilingError",
    "TinyConvDenoiser",
    "Trajectory",
    "TransferFunction",
    "ddim_forward_step",
    "ddim_reverse_step",
    "downsample",
    "fit_corrections",
    "fit_transfer",
    "generate_assets",
    "inject_reverse_step",
    "invert",
    "make_cosine_schedule",
    "make_denoiser",
    "merge",
    "mse",
    "optimize_step",
    "psnr",
    "read_image",
    "reverse",
    "run_edit",
    "seam_score",
    "split",
    "ssim",
    "sync_reverse_step",
    "tweedie",
    "upsample_to_canvas",
    "write_image",
]
