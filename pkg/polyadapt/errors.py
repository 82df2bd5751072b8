"""Exception hierarchy shared by every polyadapt module."""
from __future__ import annotations


class PolyadaptError(Exception):
    """Base class for all errors raised by the package."""


class DimensionError(PolyadaptError, ValueError):
    """Tensor shapes do not fit the operation."""


class ParameterError(PolyadaptError, ValueError):
    """A scalar hyperparameter is outside its valid range."""


class DataError(PolyadaptError, ValueError):
    """Input data violates an operation's precondition."""


class UsageError(PolyadaptError, RuntimeError):
    """An API was called in a state where it is not allowed."""


class LanguageError(PolyadaptError, KeyError):
    """A language id is not registered in a language-specific component."""

    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class ConfigError(PolyadaptError, ValueError):
    """Invalid or inconsistent configuration."""


class CheckpointError(PolyadaptError, ValueError):
    """Malformed checkpoint or checkpoint incompatible with the model."""


class TruncatedFileError(CheckpointError, OSError):
    """A container file ended before its declared payload."""


class UndefinedMetricError(PolyadaptError, ZeroDivisionError):
    """A metric has no defined value for the given inputs."""


class NumericalAbort(PolyadaptError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, message: str = "non-finite loss") -> None:
        super().__init__(f"{message} at step {step}")
        self.step = step
