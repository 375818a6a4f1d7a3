"""Exception types shared across the package."""


class SeisFaciesError(Exception):
    """Base class for all package-specific errors."""


class FormatError(SeisFaciesError):
    """Volume file and sidecar header disagree (shape, dtype, byte length)."""


class DataError(SeisFaciesError):
    """Loaded data violates an invariant (NaN/Inf values, out-of-range labels)."""


class ConfigError(SeisFaciesError):
    """Invalid configuration value or combination."""


class GenerationError(SeisFaciesError):
    """Synthetic volume generation produced an invalid volume."""

    def __init__(self, message: str, class_id: int | None = None):
        super().__init__(message)
        self.class_id = class_id


class InputError(SeisFaciesError):
    """Malformed array input to a pure function."""


class NumericError(SeisFaciesError):
    """Non-finite values encountered during compute."""


class MetricError(SeisFaciesError):
    """Metrics requested from an empty confusion matrix."""


class DegenerateVectorWarning(RuntimeWarning):
    """Cosine similarity saw a zero-norm vector; similarity was defined as 0."""
