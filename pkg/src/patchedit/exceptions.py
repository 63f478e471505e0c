"""Exception hierarchy.

Every error raised on purpose by this package derives from
:class:`PatchEditError`, so callers (the CLI in particular) can separate
configuration problems from numeric divergence.
"""


class PatchEditError(Exception):
    pass


class ConfigError(PatchEditError, ValueError):
    """Invalid user-supplied configuration (job files, asset specs, flags)."""


class ScheduleConfigError(ConfigError):
    pass


class DimensionError(PatchEditError, ValueError):
    """Tensor shapes do not agree."""


class DomainError(PatchEditError, ValueError):
    """A timestep or scalar argument lies outside the valid domain."""


class TilingError(PatchEditError, ValueError):
    pass


class ResizeError(PatchEditError, ValueError):
    pass


class GeometryError(PatchEditError, ValueError):
    """Patch geometry cannot be halved for synchronization."""


class SyncBarrierError(PatchEditError, RuntimeError):
    """Patches reached a synchronized step at different timesteps."""


class MetricError(PatchEditError, ValueError):
    pass


class ParseError(PatchEditError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericDivergenceError(PatchEditError, ArithmeticError):
    """Non-finite values or a runaway optimization.

    ``timestep`` and ``patch_id`` are filled in when known so the pipeline
    can report where sampling blew up.
    """

    def __init__(self, message, timestep=None, patch_id=None, stage=None):
        parts = [message]
        if stage is not None:
            parts.append(f"stage={stage}")
        if patch_id is not None:
            parts.append(f"patch={patch_id}")
        if timestep is not None:
            parts.append(f"t={timestep}")
        super().__init__(" ".join(parts) if len(parts) == 1 else f"{parts[0]} [{', '.join(parts[1:])}]")
        self.timestep = timestep
        self.patch_id = patch_id
        self.stage = stage
