"""Exception types shared across the package."""


class GradPropError(Exception):
    """Base class for all package errors."""


class ConfigError(GradPropError, ValueError):
    """Invalid network, optimizer or experiment configuration."""


class ShapeError(GradPropError, ValueError):
    """Array dimensions do not agree."""


class InputError(GradPropError, ValueError):
    """Non-finite or otherwise unusable input values."""


class NumericError(GradPropError, ArithmeticError):
    """A NaN or infinity appeared in an update."""


class SingularityError(GradPropError, ArithmeticError):
    """A least-squares design matrix is rank deficient."""


class DivergenceError(GradPropError, ArithmeticError):
    """A closed-loop system is unstable, so the value is undefined."""


class ParseError(GradPropError, ValueError):
    """A data file could not be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class StateError(GradPropError, RuntimeError):
    """Operation not allowed in the object's current state."""


class UnknownUnitError(GradPropError, LookupError):
    """A unit id does not name a unit of the network."""
