"""Exception hierarchy shared by every cladlab module."""


class CladLabError(Exception):
    """Base class for all errors raised by cladlab."""


class DimensionError(CladLabError, ValueError):
    pass


class DegenerateVectorError(CladLabError, ValueError):
    """A vector whose norm is too small for a cosine similarity."""


class NumericalError(CladLabError, ArithmeticError):
    """Non-finite loss or gradient encountered during training."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ConfigError(CladLabError, ValueError):
    pass


class FeasibilityError(CladLabError, ValueError):
    """A prototype collision spec could not be realized."""


class ParseError(CladLabError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class FormatVersionError(CladLabError, ValueError):
    pass


class ConsistencyError(CladLabError, RuntimeError):
    """Internal bookkeeping invariant violated (e.g. a class stored twice)."""
