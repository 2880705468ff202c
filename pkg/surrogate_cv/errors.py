"""
Exception hierarchy for surrogate control-variates estimation.

Every user-facing failure (bad input files, degenerate data, invalid
arguments) derives from SurrogateCVError so the CLI can map it to exit
code 1. InvariantViolation is reserved for internal bugs (exit code 2).
"""

from typing import Optional


class SurrogateCVError(Exception):
    """Base class for dataset and estimation errors."""


class ConfigError(SurrogateCVError):
    """Configuration file missing or malformed."""


class ParseError(SurrogateCVError):
    """Malformed data row in an input file."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaError(SurrogateCVError):
    """Missing, unexpected or inconsistent columns."""


class EmptyDataset(SurrogateCVError):
    """Too few paired samples for the requested computation."""


class DimensionMismatch(SurrogateCVError):
    """Surrogate or feature dimensions disagree."""


class EmptySurrogate(SurrogateCVError):
    """Surrogate pool too small for a nonzero coefficient."""


class SingularCovariance(SurrogateCVError):
    """Surrogate covariance could not be factorised even after ridge escalation."""


class DegenerateTarget(SurrogateCVError):
    """Target metric has zero sample variance."""


class InvalidDelta(SurrogateCVError):
    """Failure probability outside (0, 1)."""


class InvalidAlpha(SurrogateCVError):
    """Deviation threshold not strictly positive."""


class InvalidSplit(SurrogateCVError):
    """Fit/estimation split out of range."""


class InsufficientData(SurrogateCVError):
    """Not enough samples to train the requested model."""


class InvalidArgument(SurrogateCVError):
    """Argument outside its valid range."""


class InvariantViolation(Exception):
    """Internal consistency check failed."""
