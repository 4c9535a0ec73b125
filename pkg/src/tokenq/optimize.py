"""Choosing the max-token limit and batch sizes.

Two token-limit objectives trade reply quality against delay:

* ``V1(n) = theta E[u | n] - (1 - theta) E[W(n)]`` for patient users,
* ``V2(n) = theta E[u | n] - (1 - theta) E[W_q(n)] - pi(n) * loss_cost`` when
  users give up after ``tau`` seconds.

Both are maximized over a grid of candidate limits.  Batch sizing minimizes
the bulk-service delay over a range of ``b``.
"""

from __future__ import annotations

import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from typing import Any

from . import analytic
from .dist import TokenDistribution
from .errors import (
    ApproximationDomainError,
    InstabilityError,
    InvalidArgumentError,
    NoFeasiblePointError,
    NumericalFailureError,
)
from .latency import BatchLatencyModel, LinearEnvelope, SingleLatencyModel, linearize, mean_batch_time
from .sim import DynamicBatch, ElasticBatch, FixedBatch, SimConfig, SingleFCFS, replicate

__all__ = [
    "TokenLimitObjective",
    "Optimum",
    "SimSettings",
    "PolicyComparison",
    "expected_utility",
    "optimize_token_limit",
    "optimal_fixed_batch",
    "recommend_policy",
    "grid",
]


def grid(start: float, stop: float, step: float) -> list[float]:
    """Inclusive arithmetic grid, e.g. ``grid(100, 3000, 100)``."""
    if step <= 0 or stop < start:
        raise InvalidArgumentError("need step > 0 and stop >= start")
    n = int(math.floor((stop - start) / step + 1e-9))
    return [start + i * step for i in range(n + 1)]


@dataclass(frozen=True)
class TokenLimitObjective:
    variant: str
    theta: float
    grid: Sequence[float]
    loss_cost: float = 0.0
    tau: float | None = None
    # literal reproduction of the "+ (1 - theta) E[W]" form of V2
    plus_sign: bool = False

    def __post_init__(self):
        if self.variant not in ("V1", "V2"):
            raise InvalidArgumentError(f"variant must be 'V1' or 'V2', got {self.variant!r}")
        if not 0.0 <= self.theta <= 1.0:
            raise InvalidArgumentError(f"theta must lie in [0, 1], got {self.theta}")
        g = list(self.grid)
        if not g or any(x < 1 for x in g) or any(b <= a for a, b in zip(g, g[1:])):
            raise InvalidArgumentError("grid must be nonempty, strictly ascending and >= 1")
        if self.variant == "V2":
            if self.tau is None or not self.tau > 0:
                raise InvalidArgumentError("V2 needs a patience tau > 0")
            if self.loss_cost < 0:
                raise InvalidArgumentError("loss_cost must be >= 0")


@dataclass
class Optimum:
    best: float
    value: float
    table: list[dict[str, Any]]
    excluded: list[tuple[float, str]] = field(default_factory=list)
    sense: str = "max"


@dataclass(frozen=True)
class SimSettings:
    horizon: int = 50_000
    warmup: int = 1_000
    seed: int = 0
    replications: int = 5
    workers: int = 1


def expected_utility(d: TokenDistribution, n_max: float) -> float:
    return d.clipped_utility_mean(n_max)


def _pick(rows: list[dict[str, Any]], key: str, sense: str) -> dict[str, Any]:
    best = None
    for row in rows:
        v = row[key]
        # strict comparison keeps the smaller candidate on ties
        if best is None or (v > best[key] if sense == "max" else v < best[key]):
            best = row
    assert best is not None
    return best


def optimize_token_limit(
    obj: TokenLimitObjective,
    lam: float,
    m: SingleLatencyModel,
    d: TokenDistribution,
    simulate: SimSettings | None = None,
) -> Optimum:
    """Grid search for the max-token limit.

    Candidates where the delay model is undefined (unstable queue for V1,
    scv outside [0, 1] for V2) are dropped and listed in ``excluded``.  With
    ``simulate`` set, delays and losses come from the simulator instead of
    the closed forms.
    """
    rows: list[dict[str, Any]] = []
    excluded: list[tuple[float, str]] = []
    for n in obj.grid:
        s1, s2 = analytic.clipped_service_moments(m, d, n)
        util = expected_utility(d, n)
        row: dict[str, Any] = {"n_max": n, "utility": float(util), "rho": float(lam * s1),
                               "scv": float((s2 - s1 * s1) / (s1 * s1))}
        try:
            if obj.variant == "V1":
                wait = analytic.mg1_wait(lam, s1, s2).mean_wait
                loss, wait_served = 0.0, wait
            else:
                res = analytic.impatience_blend(lam, s1, s2, obj.tau)
                wait, loss, wait_served = res.mean_wait_all, res.loss_fraction, res.mean_wait_served
        except InstabilityError as exc:
            excluded.append((n, f"unstable (rho={exc.rho:.4g})"))
            continue
        except ApproximationDomainError as exc:
            excluded.append((n, f"scv {exc.scv:.4g} outside [0, 1]"))
            continue
        if simulate is not None:
            cfg = SimConfig(lam, d, m, SingleFCFS(n), patience=obj.tau if obj.variant == "V2" else None,
                            warmup=simulate.warmup, horizon=simulate.horizon, seed=simulate.seed,
                            replications=simulate.replications)
            st = replicate(cfg, workers=simulate.workers)
            wait, loss, wait_served = st.mean_wait, st.loss_fraction, st.mean_wait_served
        sign = 1.0 if (obj.variant == "V2" and obj.plus_sign) else -1.0
        value = obj.theta * util + sign * (1 - obj.theta) * wait
        if obj.variant == "V2":
            value -= loss * obj.loss_cost
        row.update(mean_wait=float(wait), loss_fraction=float(loss),
                   mean_wait_served=float(wait_served), objective=float(value))
        rows.append(row)
    if not rows:
        raise NoFeasiblePointError("no feasible max-token limit on the grid")
    best = _pick(rows, "objective", "max")
    return Optimum(best["n_max"], best["objective"], rows, excluded, "max")


def optimal_fixed_batch(
    lam: float,
    m: BatchLatencyModel,
    d: TokenDistribution,
    b_range: Iterable[int],
    refine: bool = True,
) -> Optimum:
    """Batch size minimizing the bulk-service delay at arrival rate ``lam``."""
    rows: list[dict[str, Any]] = []
    excluded: list[tuple[float, str]] = []
    for b in sorted(set(int(x) for x in b_range)):
        h = mean_batch_time(m, d, b)
        row = {"b": b, "batch_time": h, "throughput": b / h, "rho": lam * h / b}
        try:
            row["mean_delay"] = analytic.fixed_batch_delay(lam, b, h, refine=refine)
        except InstabilityError as exc:
            excluded.append((b, f"unstable (lam H / b = {exc.rho:.4g})"))
            continue
        except NumericalFailureError as exc:
            excluded.append((b, str(exc)))
            continue
        rows.append(row)
    if not rows:
        raise NoFeasiblePointError(f"no stable fixed batch size at lam={lam}")
    best = _pick(rows, "mean_delay", "min")
    return Optimum(best["b"], best["mean_delay"], rows, excluded, "min")


@dataclass
class PolicyComparison:
    lam: float
    b_star: int | None
    throughput_argmax: int
    heavy_tail: bool
    recommended: str
    rows: list[dict[str, Any]]

    def row(self, policy: str) -> dict[str, Any]:
        return next(r for r in self.rows if r["policy"] == policy)


def _bound_or_none(lam: float, env: LinearEnvelope) -> float | None:
    try:
        return analytic.dynamic_batch_bound(lam, env).phi
    except InstabilityError:
        return None


def recommend_policy(
    lam: float,
    m: BatchLatencyModel,
    d: TokenDistribution,
    b_range: Iterable[int] = range(1, 129),
    simulate: SimSettings | None = None,
) -> PolicyComparison:
    """Compare batching disciplines at one arrival rate.

    Rows: unbounded dynamic batching (delay bound), dynamic batching capped
    at the fixed-batch optimum ``b*`` (no closed form; simulated only),
    fixed batching at ``b*`` and elastic batching (delay bound with the
    elastic envelope).  Heavy-tailed token laws, where throughput peaks at a
    finite batch size, get the capped dynamic policy; light-tailed laws get
    unbounded dynamic batching.
    """
    b_range = list(b_range)
    curve = analytic.throughput_curve(m, d, b_range)
    env = linearize(m, d, b_check=max(b_range))
    heavy = curve.interior_max or env.heavy_tail
    try:
        fixed = optimal_fixed_batch(lam, m, d, b_range)
        b_star: int | None = int(fixed.best)
        fixed_delay: float | None = fixed.value
    except NoFeasiblePointError:
        b_star, fixed_delay = None, None
    elastic_env = LinearEnvelope(m.k1 + m.k3 * d.mean(), env.beta)
    rows: list[dict[str, Any]] = [
        {"policy": "dynamic", "b": None, "analytic": _bound_or_none(lam, env)},
        {"policy": "dynamic_bmax", "b": b_star, "analytic": None},
        {"policy": "fixed", "b": b_star, "analytic": fixed_delay},
        {"policy": "elastic", "b": None, "analytic": _bound_or_none(lam, elastic_env)},
    ]
    for row in rows:
        row["simulated"] = row["simulated_ci"] = None
    if simulate is not None:
        policies = {
            "dynamic": DynamicBatch(),
            "dynamic_bmax": DynamicBatch(b_star) if b_star else None,
            "fixed": FixedBatch(b_star, "sampled_max") if b_star else None,
            "elastic": ElasticBatch(),
        }
        for row in rows:
            pol = policies[row["policy"]]
            if pol is None:
                continue
            cfg = SimConfig(lam, d, m, pol, warmup=simulate.warmup, horizon=simulate.horizon,
                            seed=simulate.seed, replications=simulate.replications)
            st = replicate(cfg, workers=simulate.workers)
            row["simulated"], row["simulated_ci"] = st.mean_wait, st.mean_wait_ci
    recommended = "dynamic_bmax" if heavy and b_star is not None else "dynamic"
    return PolicyComparison(lam, b_star, curve.argmax, heavy, recommended, rows)
