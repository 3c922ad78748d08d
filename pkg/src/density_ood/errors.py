"""
Exception hierarchy for the Density OoD toolkit.
"""

from typing import Optional


class DensityOODError(Exception):
    """Base class for every error raised by the toolkit."""


class DataFormatError(DensityOODError):
    """A dataset file does not match its binary format."""

    def __init__(self, message: str, offset: Optional[int] = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DatasetError(DensityOODError):
    """A dataset violates a contract (shape, range, split sizes)."""


class BasisError(DensityOODError):
    """An orthonormal basis cannot be applied to the given data."""


class ModelError(DensityOODError):
    """A density model cannot be fitted or evaluated."""


class NonFiniteError(ModelError):
    """A NaN or infinity showed up where a finite value is required."""

    def __init__(self, message: str, where: Optional[str] = None):
        if where is not None:
            message = f"{message} [{where}]"
        super().__init__(message)
        self.where = where


class SamplingNotSupportedError(ModelError):
    """The model family has no tractable sampler."""


class EvaluationError(DensityOODError):
    """Scores or labels cannot be summarized."""


class ConfigError(DensityOODError):
    """A run configuration is missing fields or holds invalid values."""


class StorageError(DensityOODError):
    """A persisted artifact is missing, truncated or from another version."""


class PipelineError(DensityOODError):
    """An experiment stage failed; carries the stage name."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause
