"""Exception types raised across the pipeline."""


class OctPadError(Exception):
    """Base class for all pipeline errors."""


class FormatError(OctPadError):
    """Image file has an unsupported or malformed header."""


class CorruptionError(OctPadError):
    """File payload is truncated or otherwise unreadable."""


class ManifestError(OctPadError):
    """Dataset manifest is malformed or inconsistent."""


class ZeroPAViolation(OctPadError):
    """A presentation-attack volume reached a bonafide-only stage."""


class ConfigError(OctPadError):
    """Invalid configuration values."""


class DivergenceError(OctPadError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


class IncompatibleCheckpointError(OctPadError):
    """Checkpoint was written by an unsupported format version."""


class CalibrationDegenerateError(OctPadError):
    """Score-set statistics cannot normalise scores (max equals mean)."""


class DegenerateDensityError(OctPadError):
    """A Gaussian with zero standard deviation was used as a density."""
