"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes, so library code should raise the most
specific class available instead of a bare ``ValueError``.
"""


class DiffkitError(Exception):
    """Base class for all library errors."""


class ConfigurationError(DiffkitError, ValueError):
    """Incompatible or invalid settings (solver/schedule mismatch, bad flags)."""


class DimensionError(DiffkitError, ValueError):
    """Array shapes disagree with a declared layout."""


class DomainError(DiffkitError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class ArgumentError(DiffkitError, ValueError):
    """Invalid argument value (non-finite action, zero steps, ...)."""


class NumericError(DiffkitError, ArithmeticError):
    """Non-finite loss, gradient or sampler state."""


class FormatError(DiffkitError, ValueError):
    """Corrupted or truncated file."""
