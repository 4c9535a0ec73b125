"""Queueing models, a seeded simulator and an optimizer for LLM inference serving."""

from . import analytic, dist, latency, optimize, sim
from .errors import (
    ApproximationDomainError,
    EnvelopeViolationError,
    InstabilityError,
    InvalidArgumentError,
    NoFeasiblePointError,
    NumericalFailureError,
    TokenQError,
)

__version__ = "0.1.0"

__all__ = [
    "analytic",
    "dist",
    "latency",
    "optimize",
    "sim",
    "TokenQError",
    "InvalidArgumentError",
    "NumericalFailureError",
    "InstabilityError",
    "ApproximationDomainError",
    "EnvelopeViolationError",
    "NoFeasiblePointError",
    "__version__",
]
