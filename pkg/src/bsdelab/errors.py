"""Exception types raised across the package."""

from __future__ import annotations


class AlignmentError(ValueError):
    """Inputs do not live on the same time grid (or a time is off-grid)."""


class DomainError(ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class ConfigError(ValueError):
    """Invalid run configuration; ``field`` names the offending entry."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class SingularityError(ArithmeticError):
    """Least-squares design is rank deficient and no ridge was requested."""


class NumericError(ArithmeticError):
    """A numerical evaluation produced a non-finite value."""


class QuadratureError(NumericError):
    """Truncated quadrature whose tail estimate exceeds the tolerance."""

    def __init__(self, message: str, tail_estimate: float):
        super().__init__(f"{message} (tail estimate {tail_estimate:.3e})")
        self.tail_estimate = tail_estimate


class ConvergenceError(RuntimeError):
    """Picard iteration hit ``max_iters`` before reaching the tolerance."""

    def __init__(self, message: str, report):
        super().__init__(message)
        self.report = report
