"""Exception hierarchy shared across the package."""


class CaqlError(Exception):
    """Base class for all package errors."""


class DimensionError(CaqlError, ValueError):
    """Operand shapes do not conform."""


class NumericError(CaqlError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class StateError(CaqlError, RuntimeError):
    """An object was used in a state that does not allow the operation."""


class DomainError(CaqlError, ValueError):
    """Input lies outside the domain of the operation."""


class DegenerateError(DomainError):
    """Geometry is degenerate (zero-norm feature, coincident centroids, ...)."""


class UndefinedCorrelationError(DomainError):
    """A correlation was requested for a constant vector."""


class ParseError(CaqlError, ValueError):
    """A data file does not follow the expected schema."""


class ConfigError(CaqlError, ValueError):
    """Configuration value failed validation.

    ``path`` is the dotted field path, e.g. ``train.lambda_reg``.
    """

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path
        self.message = message
