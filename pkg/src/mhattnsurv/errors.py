"""Exception types shared across the package."""


class MhasError(Exception):
    """Base class for all package errors."""


class DimensionError(MhasError):
    """Operand shapes are incompatible."""


class DomainError(MhasError):
    """Input values outside the operation's domain."""


class ConfigError(MhasError):
    """Invalid configuration value or combination."""


class FormatError(MhasError):
    """Malformed file; carries the byte offset where parsing failed."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(MhasError):
    """Non-finite value where a finite one is required."""


class UsageError(MhasError):
    """Operation called without its required inputs or state."""


class NoEventBatchError(DomainError):
    """Batch contains no observed events; the partial likelihood is undefined."""


class DegenerateWeightError(DomainError):
    """Censoring survival estimate is zero at a required evaluation point."""
