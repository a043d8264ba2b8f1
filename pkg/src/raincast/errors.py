"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: validation and configuration
problems exit with 2, numeric failures (NaN or diverging training) with 3.
Anything else is a plain crash.
"""


class RaincastError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(RaincastError):
    """Bad inputs: shape or unit mismatches, out-of-range arguments."""

    exit_code = 2


class ConfigurationError(ValidationError):
    """Missing or inconsistent configuration (stats entries, profiles)."""

    exit_code = 2


class GridPackError(ValidationError):
    """Corrupt, truncated, or otherwise unreadable container files."""

    exit_code = 2


class NumericError(RaincastError):
    """Numeric failure at runtime: non-finite losses, diverging training."""

    exit_code = 3
