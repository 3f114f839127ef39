"""Exception types shared across the package."""


class CtcError(Exception):
    """Base class for all package errors."""


class ValidationError(CtcError, ValueError):
    """Invalid argument, configuration, or data-model violation."""


class GridMismatchError(ValidationError):
    """Two paths or grids that must coincide do not."""


class TrajectoryParseError(ValidationError):
    """Malformed trajectory CSV; message names the offending row/column."""

    def __init__(self, message, line=None, column=None):
        context = []
        if line is not None:
            context.append(f"line {line}")
        if column is not None:
            context.append(f"column {column!r}")
        if context:
            message = f"{message} ({', '.join(context)})"
        super().__init__(message)
        self.line = line
        self.column = column


class UnsupportedParametrizationError(ValidationError):
    """Drift matrix outside the two-exponential regime (complex or repeated eigenvalues)."""


class ConvergenceError(CtcError, RuntimeError):
    """Optimizer failed to converge; carries the best iterate found."""

    def __init__(self, message, best_x=None, best_value=None):
        super().__init__(message)
        self.best_x = best_x
        self.best_value = best_value


class PositivityError(CtcError, RuntimeError):
    """Treatment rate-of-change hit (or came numerically close to) zero."""
