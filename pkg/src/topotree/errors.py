"""Exception hierarchy shared by every stage of the reconstruction pipeline."""


class TopoTreeError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(TopoTreeError, ValueError):
    """Invalid or inconsistent configuration."""


class InputError(TopoTreeError, ValueError):
    """Malformed, missing or degenerate input data."""


class ParseError(InputError):
    """A file could not be parsed; ``record`` is the 1-based line/record index."""

    def __init__(self, message: str, record: int | None = None):
        self.record = record
        if record is not None:
            message = f"record {record}: {message}"
        super().__init__(message)


class NumericalError(TopoTreeError, ArithmeticError):
    """A numerical procedure failed (divergence, NaN, non-convergence)."""


class ConvergenceError(NumericalError):
    def __init__(self, message: str, residual: float, iterations: int):
        self.residual = residual
        self.iterations = iterations
        super().__init__(f"{message} (residual {residual:.3e} after {iterations} iterations)")
