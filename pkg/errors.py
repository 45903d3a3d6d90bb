"""Exception types shared by every stage of the recognition pipeline."""
from typing import Optional


class MerError(Exception):
    """Base class for pipeline errors."""


class ConfigurationError(MerError, RuntimeError):
    """Invalid settings, model geometry or training configuration."""


class DataError(MerError, ValueError):
    """Input data that violates a documented precondition."""


class DimensionError(DataError):
    """Tensor or image extents that do not fit together."""


class NumericError(MerError, ArithmeticError):
    """A NaN or Inf appeared where only finite values are allowed."""

    def __init__(self, message: str, where: Optional[str] = None):
        super().__init__(f"{where}: {message}" if where else message)
        self.where = where


class UsageError(MerError, RuntimeError):
    """An API was called in a way it does not support."""


class ManifestError(DataError):
    """A manifest line could not be parsed or validated."""

    def __init__(self, message: str, line_number: int, path: Optional[str] = None):
        location = f"{path}:{line_number}" if path else f"line {line_number}"
        super().__init__(f"{location}: {message}")
        self.line_number = line_number
        self.path = path


class CheckpointFormatError(DataError):
    """A checkpoint file is not in the MATN container format."""


class CheckpointVersionError(CheckpointFormatError):
    """A checkpoint was written by an unsupported format version."""

    def __init__(self, found: int, supported: int):
        super().__init__(
            f"Checkpoint format version {found} is not supported (this build reads version {supported})"
        )
        self.found = found
        self.supported = supported


class TrainingAborted(NumericError):
    """Training hit a non-finite loss."""

    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}", where="training")
        self.epoch = epoch
        self.batch = batch
