"""Exception types shared across the package."""


class IAPError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(IAPError, ValueError):
    """Operand shapes are incompatible."""


class StateError(IAPError, RuntimeError):
    """An operation was invoked on an object in the wrong state."""


class ArgumentError(IAPError, ValueError):
    """A scalar argument is outside its documented domain."""


class NumericError(IAPError, ArithmeticError):
    """A numerical procedure (e.g. a factorization) failed."""


class ConfigError(IAPError, ValueError):
    """Invalid run or data configuration."""


class FormatError(IAPError, ValueError):
    """A serialized artifact is malformed, truncated or of the wrong version."""
