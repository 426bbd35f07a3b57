"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes, so library code should raise the most
specific class that applies rather than bare ValueError.
"""


class SpdnasError(Exception):
    """Base class for all package errors."""


class ShapeError(SpdnasError):
    """Operand dimensions are inconsistent."""


class DomainError(SpdnasError):
    """A matrix function was applied outside its domain (e.g. log of a
    matrix with a non-positive eigenvalue)."""


class ContractError(SpdnasError):
    """An input violates a documented precondition (asymmetry, invalid
    weight vector, missing tape parent, ...)."""


class ConfigError(SpdnasError):
    """A configuration value is invalid or inconsistent."""


class DataError(SpdnasError):
    """A dataset file is missing, malformed, or fails validation."""


class NumericError(SpdnasError):
    """A numeric computation degenerated (NaN loss, failed retraction)."""
