"""
SEAL error types.

Invalid arguments raise plain ``ValueError``; the classes here mark the
failures the CLI maps to distinct exit codes.
"""

from typing import Optional


class SealError(Exception):
    """Base class for SEAL failures."""


class ConfigError(SealError, ValueError):
    """Run configuration is invalid or contains unknown keys."""


class DataError(SealError, ValueError):
    """Input data is missing, unreadable, misaligned or fails its checksum."""


class NumericError(SealError, FloatingPointError):
    """A loss or activation became non-finite.

    ``context`` names where it happened (parameter group, epoch, batch, loop).
    """

    def __init__(self, message: str, context: Optional[dict] = None):
        self.message = message
        self.context = dict(context or {})
        if self.context:
            detail = ", ".join(f"{k}={v}" for k, v in self.context.items())
            message = f"{message} ({detail})"
        super().__init__(message)

    def with_context(self, **extra) -> "NumericError":
        """Return a copy with additional location keys."""
        return NumericError(self.message, {**self.context, **extra})


class BudgetViolation(SealError, AssertionError):
    """A watermark exceeded its L-infinity budget. Never expected."""


# CLI exit codes
EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG_ERROR = 2
EXIT_DATA_ERROR = 3
EXIT_NUMERIC_ERROR = 4


def exit_code_for(exc: BaseException) -> int:
    """Map an exception to the CLI exit-code contract."""
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG_ERROR
    if isinstance(exc, DataError):
        return EXIT_DATA_ERROR
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC_ERROR
    return EXIT_FAILURE
