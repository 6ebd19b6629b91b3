"""
Exception hierarchy for longview.

Every failure raised on purpose by the services derives from LongviewError,
so the command layer can map it to an exit code in one place.
"""
from pathlib import Path
from typing import Optional, Union


class LongviewError(Exception):
    """Base class for all longview errors."""


class ShapeError(LongviewError):
    """Tensor or image shapes violate an operation's contract."""


class NumericalError(LongviewError):
    """NaN or Inf produced where finite values are required."""


class TransformError(LongviewError):
    """Affine transform is invalid (e.g. non-invertible)."""


class DegenerateImageError(LongviewError):
    """Image has an empty nonzero mask."""


class PairingError(LongviewError):
    """Exam pair or exam ordering invariants are violated."""


class SamplingError(LongviewError):
    """Epoch sampling preconditions do not hold."""


class ModelInputError(LongviewError):
    """Network input is missing or malformed."""


class AUCUndefinedError(LongviewError):
    """AUC requested on labels of a single class."""


class UsageError(LongviewError):
    """Command-line misuse detected after argument parsing."""


class ManifestError(LongviewError):
    """Cohort manifest is malformed."""

    def __init__(self, message: str, line_number: Optional[int] = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class RasterFormatError(LongviewError):
    """Raster file is missing, truncated, or not an LVIM file."""

    def __init__(self, message: str, path: Union[str, Path]):
        self.path = Path(path)
        super().__init__(f"{path}: {message}")


class CheckpointFormatError(LongviewError):
    """Checkpoint file is truncated or has the wrong magic/version."""
