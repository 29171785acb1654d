"""Exception hierarchy shared by every module."""


class MsMambaError(Exception):
    """Base class for all package errors."""


class DimensionError(MsMambaError, ValueError):
    """Operand shapes are incompatible."""


class GraphError(MsMambaError, RuntimeError):
    """Misuse of the computation graph (untraced loss, consumed tape, ...)."""


class DomainError(MsMambaError, ValueError):
    """An argument lies outside the mathematical domain of the operation."""


class NumericError(MsMambaError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class ConfigError(MsMambaError, ValueError):
    """Invalid or inconsistent configuration."""


class DataError(MsMambaError, ValueError):
    """Malformed or insufficient input data."""
