"""Exception types shared across the package."""

from __future__ import annotations


class TokenQError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(TokenQError, ValueError):
    """Raised when an argument violates a documented precondition."""


class NumericalFailureError(TokenQError, ArithmeticError):
    """Raised when quadrature, root finding or a series fails to converge."""


class InstabilityError(TokenQError):
    """The queue is not stable at the requested load.

    Carries the offending utilization so callers (the optimizers in
    particular) can skip the point instead of propagating infinities.
    """

    def __init__(self, rho: float, message: str | None = None):
        self.rho = float(rho)
        super().__init__(message or f"unstable queue: utilization {self.rho:.6g} >= 1")


class ApproximationDomainError(TokenQError, ValueError):
    """The impatience approximation requires 0 <= scv <= 1."""

    def __init__(self, scv: float):
        self.scv = float(scv)
        super().__init__(f"squared coefficient of variation {self.scv:.6g} outside [0, 1]")


class EnvelopeViolationError(TokenQError):
    """A linear envelope failed to dominate the mean batch time."""

    def __init__(self, b: int, envelope: float, actual: float):
        self.b = b
        self.envelope = envelope
        self.actual = actual
        super().__init__(
            f"linear envelope {envelope:.6g} below mean batch time {actual:.6g} at b={b}"
        )


class NoFeasiblePointError(TokenQError):
    """Every candidate of an optimization sweep was infeasible."""
