"""Exception hierarchy shared by every module."""


class DeepFuzzyError(Exception):
    """Base class for all package errors."""


class ConfigurationError(DeepFuzzyError, ValueError):
    """Invalid shapes, strides, layer settings or hyperparameters."""


class DataError(DeepFuzzyError, ValueError):
    """Labels or samples that violate a data contract."""


class FormatError(DeepFuzzyError, ValueError):
    """Malformed dataset or checkpoint file."""


class UsageError(DeepFuzzyError, RuntimeError):
    """API misuse, e.g. calling backward on a non-scalar."""


class NumericError(DeepFuzzyError, FloatingPointError):
    """Non-finite values detected while validation is enabled."""


class DegenerateInputError(DeepFuzzyError, ZeroDivisionError):
    """Every rule has zero firing strength."""


class DivergenceError(DeepFuzzyError, FloatingPointError):
    """Training produced a non-finite loss or gradient."""
