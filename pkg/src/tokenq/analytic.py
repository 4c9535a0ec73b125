"""Closed-form delay and loss formulas.

All delays are steady-state means in seconds.  Unstable inputs raise
:class:`~tokenq.errors.InstabilityError` carrying the utilization rather than
returning an infinity.
"""

from __future__ import annotations

import cmath
import math
from collections.abc import Callable, Iterable
from dataclasses import dataclass, field

import mpmath

from .dist import TokenDistribution
from .errors import (
    ApproximationDomainError,
    InstabilityError,
    InvalidArgumentError,
    NumericalFailureError,
)
from .latency import BatchLatencyModel, LinearEnvelope, SingleLatencyModel, mean_batch_time

__all__ = [
    "MG1Result",
    "ImpatienceResult",
    "BoundResult",
    "ThroughputCurve",
    "mg1_wait",
    "clipped_service_moments",
    "clipped_mg1_wait",
    "patience_component",
    "impatience_blend",
    "dynamic_batch_bound",
    "series_roots",
    "refine_roots",
    "fixed_batch_delay",
    "throughput_curve",
]

SERIES_TERMS = 20


@dataclass(frozen=True)
class MG1Result:
    rho: float
    mean_wait: float
    stable: bool


@dataclass(frozen=True)
class ImpatienceResult:
    loss_fraction: float
    mean_wait_all: float
    mean_wait_served: float
    scv: float
    components: dict[str, tuple[float, float]] = field(default_factory=dict)


@dataclass(frozen=True)
class BoundResult:
    phi0: float
    phi1: float

    @property
    def phi(self) -> float:
        return min(self.phi0, self.phi1)


@dataclass(frozen=True)
class ThroughputCurve:
    points: list[tuple[int, float]]
    monotone: bool
    interior_max: bool

    @property
    def argmax(self) -> int:
        return max(self.points, key=lambda p: (p[1], -p[0]))[0]


# -- M/G/1 -----------------------------------------------------------------------------


def mg1_wait(lam: float, s_mean: float, s_second_moment: float) -> MG1Result:
    """Pollaczek-Khinchine mean wait ``lam E[S^2] / (2 (1 - rho))``."""
    if not lam > 0:
        raise InvalidArgumentError(f"arrival rate must be > 0, got {lam}")
    if s_mean < 0 or s_second_moment < s_mean**2 * (1 - 1e-12):
        raise InvalidArgumentError("need E[S] >= 0 and E[S^2] >= E[S]^2")
    rho = lam * s_mean
    if rho >= 1:
        raise InstabilityError(rho)
    return MG1Result(float(rho), float(lam * s_second_moment / (2 * (1 - rho))), True)


def clipped_service_moments(
    m: SingleLatencyModel, d: TokenDistribution, n_max: float
) -> tuple[float, float]:
    """``(E[S], E[S^2])`` of ``S = a min(N, n_max) + c``."""
    n1, n2 = d.clipped_moments(n_max)
    s1 = m.a * n1 + m.c
    var_n = max(n2 - n1 * n1, 0.0)
    return s1, s1 * s1 + m.a**2 * var_n


def clipped_mg1_wait(
    lam: float, m: SingleLatencyModel, d: TokenDistribution, n_max: float
) -> MG1Result:
    s1, s2 = clipped_service_moments(m, d, n_max)
    return mg1_wait(lam, s1, s2)


# -- impatience --------------------------------------------------------------------------
#
# Customers wait at most tau before service starts.  Under FCFS with a single
# server a customer's wait is the virtual workload V found on arrival, and
# customers finding V > tau leave without adding work.  With H(x) the
# (unnormalized) accepted-workload CDF, P0 the idle probability and rho = lam E[S]:
#   P(V <= x) = P0 H(x) for x <= tau,   1 - P0 = rho (1 - pi)   (work balance)
# so P0 = 1 / (1 + rho H(tau)), pi = 1 - P0 H(tau) and
# E[min(V, tau)] = tau - P0 int_0^tau H(x) dx.  No stability condition needed.


def _h_exponential(lam: float, s_mean: float, tau: float) -> tuple[float, float]:
    """``H(tau)`` and ``int_0^tau H`` for exponential service."""
    delta = 1.0 / s_mean - lam
    z = delta * tau
    if abs(z) < 1e-4:
        f1 = 1 - z / 2 + z * z / 6
        f2 = 0.5 - z / 6 + z * z / 24
    else:
        f1 = -math.expm1(-z) / z
        f2 = (z + math.expm1(-z)) / (z * z)
    return 1.0 + lam * tau * f1, tau + lam * tau * tau * f2


def _h_deterministic(lam: float, s_mean: float, tau: float) -> tuple[float, float]:
    """``H(tau)`` and ``int_0^tau H`` for constant service ``s_mean``.

    ``H(x) = sum_{k <= x/D} (lam (kD - x))^k / k! exp(-lam (kD - x))`` is
    Erlang's M/D/1 workload series; the alternating terms cancel badly, so it
    is summed in extended precision.
    """
    K = int(math.floor(tau / s_mean + 1e-12))
    if K > 20000:
        raise NumericalFailureError(f"patience/service ratio {tau / s_mean:.3g} too large")
    dps = 30 + int(2 * lam * tau / math.log(10))
    with mpmath.workdps(dps):
        lam_m, tau_m, d_m = mpmath.mpf(lam), mpmath.mpf(tau), mpmath.mpf(s_mean)
        h = mpmath.mpf(0)
        area = mpmath.mpf(0)
        for k in range(K + 1):
            t = lam_m * (tau_m - k * d_m)
            if t < 0:
                break
            et = mpmath.exp(t)
            term = (-t) ** k / mpmath.factorial(k) if k else mpmath.mpf(1)
            h += term * et
            # int_0^T (-u)^k / k! e^u du = e^T sum_{j<=k} (-T)^j / j! - 1
            partial = mpmath.mpf(0)
            power = mpmath.mpf(1)
            for j in range(k + 1):
                if j:
                    power *= -t / j
                partial += power
            area += et * partial - 1
        return float(h), float(area / lam_m)


def patience_component(lam: float, s_mean: float, tau: float, service: str) -> tuple[float, float]:
    """Loss fraction and mean wait (lost customers counted at ``tau``).

    Exact for a single FCFS server with Poisson arrivals and deterministic
    patience ``tau``.

    Args:
        service: ``"exponential"`` or ``"deterministic"`` service with mean
            ``s_mean``.
    """
    if not (lam > 0 and s_mean > 0 and tau > 0):
        raise InvalidArgumentError("need lam > 0, s_mean > 0 and tau > 0")
    if service == "exponential":
        h_tau, area = _h_exponential(lam, s_mean, tau)
    elif service == "deterministic":
        h_tau, area = _h_deterministic(lam, s_mean, tau)
    else:
        raise InvalidArgumentError(f"unknown service kind {service!r}")
    rho = lam * s_mean
    p0 = 1.0 / (1.0 + rho * h_tau)
    loss = 1.0 - p0 * h_tau
    wait = tau - p0 * area
    if not (-1e-9 <= loss <= 1 + 1e-9 and -1e-9 <= wait <= tau * (1 + 1e-9)):
        raise NumericalFailureError(f"{service} component out of range: loss={loss}, wait={wait}")
    return min(max(loss, 0.0), 1.0), min(max(wait, 0.0), tau)


ComponentFn = Callable[[float, float, float, str], tuple[float, float]]


def impatience_blend(
    lam: float,
    s_mean: float,
    s_second_moment: float,
    tau: float,
    component: ComponentFn = patience_component,
) -> ImpatienceResult:
    """Loss fraction and waits with impatient users, interpolated on the scv.

    The general-service answer is the convex blend, weighted by the squared
    coefficient of variation of service, of the deterministic-service and
    exponential-service answers at the same mean.  ``component`` computes
    those two endpoints and may be swapped for a simulation estimator.
    """
    if not tau > 0:
        raise InvalidArgumentError(f"patience must be > 0, got {tau}")
    if not s_mean > 0:
        raise InvalidArgumentError(f"mean service must be > 0, got {s_mean}")
    scv = float((s_second_moment - s_mean**2) / s_mean**2)
    if -1e-12 < scv < 0:
        scv = 0.0
    if not 0.0 <= scv <= 1.0:
        raise ApproximationDomainError(scv)
    try:
        pi_det, wq_det = component(lam, s_mean, tau, "deterministic")
        pi_exp, wq_exp = component(lam, s_mean, tau, "exponential")
    except (ArithmeticError, mpmath.libmp.NoConvergence) as exc:
        raise NumericalFailureError(f"impatience component failed: {exc}") from exc
    pi_det, wq_det, pi_exp, wq_exp = map(float, (pi_det, wq_det, pi_exp, wq_exp))
    loss = (1 - scv) * pi_det + scv * pi_exp
    wq = (1 - scv) * wq_det + scv * wq_exp
    wqs = (wq - tau * loss) / (1 - loss) if loss < 1 else math.nan
    return ImpatienceResult(
        loss, wq, wqs, scv,
        {"deterministic": (pi_det, wq_det), "exponential": (pi_exp, wq_exp)},
    )


# -- batching ---------------------------------------------------------------------------------


def dynamic_batch_bound(lam: float, env: LinearEnvelope) -> BoundResult:
    """Upper bounds on the mean wait under serve-everything dynamic batching
    with linear batch time ``alpha b + beta``."""
    if lam < 0:
        raise InvalidArgumentError(f"arrival rate must be >= 0, got {lam}")
    a, b = env.alpha, env.beta
    if lam * a >= 1:
        raise InstabilityError(lam * a)
    den = 2 * (1 - (lam * a) ** 2)
    return BoundResult(lam * (a + b) ** 2 / den, (lam * a * b + lam * a * a + b) / den)


def _check_bulk(lam: float, b: int, H: float) -> float:
    if b < 1 or int(b) != b:
        raise InvalidArgumentError(f"batch size must be a positive integer, got {b}")
    if not (lam > 0 and H > 0):
        raise InvalidArgumentError("need lam > 0 and H > 0")
    if lam * H >= b:
        raise InstabilityError(lam * H / b)
    return lam * H


def series_roots(lam: float, b: int, H: float, terms: int = SERIES_TERMS) -> list[complex]:
    """Truncated Lagrange series for the roots of ``z = w_k exp(lam H (z - 1) / b)``."""
    r = _check_bulk(lam, b, H)
    coeffs = [
        math.exp(-r * m / b + (m - 1) * math.log(r * m / b) - math.lgamma(m + 1))
        for m in range(1, terms + 1)
    ]
    roots = []
    for k in range(1, b):
        w = cmath.exp(2j * math.pi * k / b)
        roots.append(sum(c * w**m for m, c in enumerate(coeffs, start=1)))
    return roots


def refine_roots(
    lam: float, b: int, H: float, tol: float = 1e-12, max_iter: int = 200
) -> list[complex]:
    """Polish the series roots by fixed-point iteration to residual < ``tol``."""
    r = _check_bulk(lam, b, H)
    out = []
    for k, z in enumerate(series_roots(lam, b, H), start=1):
        w = cmath.exp(2j * math.pi * k / b)
        for _ in range(max_iter):
            z_new = w * cmath.exp(r * (z - 1) / b)
            if abs(z_new - z) < tol * 0.1:
                z = z_new
                break
            z = z_new
        resid = abs(z - w * cmath.exp(r * (z - 1) / b))
        if resid >= tol or abs(z) >= 1:
            raise NumericalFailureError(f"root {k} of the bulk queue did not converge (residual {resid:.3g})")
        out.append(z)
    return out


def fixed_batch_delay(lam: float, b: int, H: float, refine: bool = True) -> float:
    """Mean delay of the bulk-service model with batch size ``b`` and batch time ``H``.

    ``refine=False`` keeps the plain 20-term root series.  Algebraically the
    expression is the mean sojourn (wait plus ``H``) of an M/D/c queue with
    ``c = b`` servers; at ``b = 1`` it reduces to ``H (2 - lam H) / (2 (1 - lam H))``.
    """
    r = _check_bulk(lam, b, H)
    roots = refine_roots(lam, b, H) if refine else series_roots(lam, b, H)
    total = complex((b - (b - r) ** 2) / (2 * (b - r)))
    for z in roots:
        total += 1 / (1 - z)
    if abs(total.imag) > 1e-6:
        raise NumericalFailureError(f"residual imaginary part {total.imag:.3g}")
    return total.real / lam


def throughput_curve(
    m: BatchLatencyModel, d: TokenDistribution, b_range: Iterable[int]
) -> ThroughputCurve:
    """Requests per second ``b / mean_batch_time(b)`` over ``b_range``."""
    bs = sorted(set(int(b) for b in b_range))
    if not bs:
        raise InvalidArgumentError("b_range is empty")
    pts = [(b, b / mean_batch_time(m, d, b)) for b in bs]
    mus = [p[1] for p in pts]
    monotone = all(y > x for x, y in zip(mus, mus[1:]))
    i_max = max(range(len(mus)), key=lambda i: (mus[i], -i))
    return ThroughputCurve(pts, monotone, 0 < i_max < len(mus) - 1)
