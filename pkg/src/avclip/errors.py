"""Exception types shared across the package."""


class AvclipError(Exception):
    """Base class for all package errors."""


class FormatError(AvclipError):
    """A file does not have the expected binary or JSON layout."""


class CorruptionError(FormatError):
    """A file has a valid header but a truncated or inconsistent payload."""


class ValidationError(AvclipError, ValueError):
    """Data violates a domain invariant (non-finite values, bad indices, ...)."""


class DimensionError(ValidationError):
    """Array shapes do not agree."""


class ConfigError(AvclipError, ValueError):
    """Invalid configuration value or unknown configuration key."""


class TrainingAborted(AvclipError, RuntimeError):
    """Raised when an optimisation run produces a non-finite loss."""

    def __init__(self, step, loss):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss
