"""Exception types shared across the package."""


class GspsError(Exception):
    """Base class for errors raised by this package."""


class ValidationError(GspsError, ValueError):
    """Input violates a documented precondition."""


class NumericalError(GspsError, ArithmeticError):
    """A numerical routine produced non-finite or singular results."""
