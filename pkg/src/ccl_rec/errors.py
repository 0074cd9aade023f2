"""Exception hierarchy for ccl_rec.

Every error raised by the package derives from CclRecError and also from the
closest builtin, so callers can catch either.
"""

from pathlib import Path
from typing import Optional, Union


class CclRecError(Exception):
    """Base class for all package errors."""


class DimensionError(CclRecError, ValueError):
    """Tensor shapes do not agree."""


class DomainError(CclRecError, ValueError):
    """Input outside the domain of an operation (log of 0, empty softmax, ...)."""


class ContractError(CclRecError, RuntimeError):
    """A caller broke an operation's precondition."""


class ParseError(CclRecError, ValueError):
    """Malformed input file."""

    def __init__(self, message: str, path: Optional[Union[str, Path]] = None, line_number: Optional[int] = None):
        self.path = path
        self.line_number = line_number
        location = ""
        if path is not None:
            location = f"{path}"
            if line_number is not None:
                location += f":{line_number}"
            location += ": "
        super().__init__(f"{location}{message}")


class FeatureIndexError(CclRecError, IndexError):
    """Item id outside the feature table."""


class CapacityError(CclRecError, ValueError):
    """Requested more distinct items than the gallery can supply."""


class AugmentationError(CclRecError, RuntimeError):
    """Substitute rejection sampling gave up."""

    def __init__(self, message: str, user: Optional[int] = None):
        self.user = user
        prefix = f"user {user}: " if user is not None else ""
        super().__init__(f"{prefix}{message}")


class UndefinedMetricError(CclRecError, ValueError):
    """Metric is undefined for the given predictions."""


class NonFiniteGradientError(CclRecError, FloatingPointError):
    """A gradient contains NaN or Inf; the optimizer step was aborted."""

    def __init__(self, parameter: str, bad_entries: int):
        self.parameter = parameter
        self.bad_entries = bad_entries
        super().__init__(f"non-finite gradient in {parameter} ({bad_entries} entries); step aborted")


class CheckpointError(CclRecError, ValueError):
    """Checkpoint file is corrupt or has the wrong format."""


class ConfigError(CclRecError):
    """Invalid or unknown configuration."""
