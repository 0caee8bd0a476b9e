"""Exception hierarchy.

Every error raised on purpose by the package derives from
:class:`MargexError`. The CLI maps the classes onto exit codes through the
``exit_code`` attribute.
"""

from __future__ import annotations


class MargexError(Exception):
    exit_code = 1


class ArgumentError(MargexError, ValueError):
    """Bad argument: unknown name, wrong dimension, invalid option."""

    exit_code = 2


class StructureError(MargexError, ValueError):
    """Correlation structure incompatible with a cluster layout."""

    exit_code = 3


class DomainError(MargexError, ValueError):
    """Parameter outside the admissible region of the model."""

    exit_code = 3


class ResourceError(MargexError):
    """Request exceeds a configured computational cap."""

    exit_code = 3


class NumericalError(MargexError, ArithmeticError):
    def __init__(self, message: str, cluster: int | None = None):
        super().__init__(message)
        self.cluster = cluster

    exit_code = 4


class ConvergenceError(MargexError, RuntimeError):
    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = list(trace) if trace is not None else []

    exit_code = 4


class SeparationError(ConvergenceError):
    """Coefficient norm diverged; the data are (quasi-)separated."""


class BoundaryError(MargexError):
    """Asymptotic formula requested at a boundary estimate."""

    exit_code = 4


class ParseError(MargexError, ValueError):
    def __init__(self, message: str, row: int | None = None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row

    exit_code = 3


class StudyError(MargexError, RuntimeError):
    exit_code = 4


class UnreliableVarianceWarning(UserWarning):
    """Sandwich meat estimated from fewer clusters than parameters."""
