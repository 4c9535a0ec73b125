"""Seeded discrete-event simulator for single-request and batched serving.

Arrivals are Poisson.  Each request draws an output-token count from the
workload distribution; the service discipline decides when the (single)
server starts work and how long it takes:

* :class:`SingleFCFS` serves one request at a time, optionally clipping the
  token count at ``n_max`` and optionally letting requests renege after
  waiting ``patience`` seconds.
* :class:`DynamicBatch` takes every waiting request (up to ``b_max``) when
  the server frees up; the batch pads to its longest reply.
* :class:`FixedBatch` waits until exactly ``b`` requests are queued.
* :class:`ElasticBatch` forms batches like dynamic batching, but each reply
  returns as soon as its own tokens are generated.  The next batch still
  waits for the whole current batch.

Events are ordered by ``(time, priority, sequence)`` with completions before
reneges before arrivals, so a batch formed at a completion instant never
absorbs an arrival at the same instant.
"""

from __future__ import annotations

import csv
import heapq
import math
from collections import Counter, deque
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Union

import numpy as np
from scipy import stats as sps

from .dist import Deterministic, Exponential, TokenDistribution
from .errors import InvalidArgumentError
from .latency import (
    BatchLatencyModel,
    SingleLatencyModel,
    batch_service_time,
    elastic_batch_time,
    mean_batch_time,
)

__all__ = [
    "SingleFCFS",
    "DynamicBatch",
    "FixedBatch",
    "ElasticBatch",
    "Policy",
    "SimConfig",
    "RequestRecord",
    "SimStats",
    "run",
    "replicate",
    "replicate_with_trace",
    "patience_component_mc",
    "write_trace_csv",
    "TRACE_HEADER",
]

TRACE_HEADER = (
    "arrival_s",
    "service_start_s",
    "completion_s",
    "tokens_requested",
    "tokens_served",
    "lost",
    "batch_id",
    "batch_size",
)

_COMPLETION, _RENEGE, _ARRIVAL = 0, 1, 2
_BLOCK = 4096
SATURATION = 0.995


# -- policies ---------------------------------------------------------------------------------


def _check_bmax(b_max):
    if b_max is not None and (int(b_max) != b_max or b_max < 1):
        raise InvalidArgumentError(f"b_max must be a positive integer or None, got {b_max!r}")


@dataclass(frozen=True)
class SingleFCFS:
    n_max: float | None = None

    def __post_init__(self):
        if self.n_max is not None and not self.n_max >= 1:
            raise InvalidArgumentError(f"n_max must be >= 1, got {self.n_max}")


@dataclass(frozen=True)
class DynamicBatch:
    b_max: int | None = None

    def __post_init__(self):
        _check_bmax(self.b_max)


@dataclass(frozen=True)
class FixedBatch:
    b: int
    service_mode: str = "deterministic_mean"

    def __post_init__(self):
        if int(self.b) != self.b or self.b < 1:
            raise InvalidArgumentError(f"b must be a positive integer, got {self.b!r}")
        if self.service_mode not in ("deterministic_mean", "sampled_max"):
            raise InvalidArgumentError(f"unknown service_mode {self.service_mode!r}")


@dataclass(frozen=True)
class ElasticBatch:
    b_max: int | None = None

    def __post_init__(self):
        _check_bmax(self.b_max)


Policy = Union[SingleFCFS, DynamicBatch, FixedBatch, ElasticBatch]


@dataclass(frozen=True)
class SimConfig:
    lam: float
    distribution: TokenDistribution
    latency: SingleLatencyModel | BatchLatencyModel
    policy: Policy
    patience: float | None = None
    warmup: int = 1000
    horizon: int = 100_000
    seed: int = 0
    replications: int = 1

    def __post_init__(self):
        if not (self.lam > 0 and math.isfinite(self.lam)):
            raise InvalidArgumentError(f"arrival rate must be > 0, got {self.lam}")
        if not (self.horizon > self.warmup >= 0):
            raise InvalidArgumentError("need horizon > warmup >= 0")
        if self.replications < 1:
            raise InvalidArgumentError("replications must be >= 1")
        if self.patience is not None:
            if not self.patience > 0:
                raise InvalidArgumentError(f"patience must be > 0, got {self.patience}")
            if not isinstance(self.policy, SingleFCFS):
                raise InvalidArgumentError("patience is only supported with single-request FCFS")
        if not isinstance(self.policy, SingleFCFS) and not isinstance(self.latency, BatchLatencyModel):
            raise InvalidArgumentError("batching policies need a batch latency model")
        if not 0 <= self.seed < 2**64:
            raise InvalidArgumentError("seed must fit in 64 unsigned bits")

    def to_dict(self) -> dict:
        pol = asdict(self.policy)
        pol["kind"] = {
            SingleFCFS: "single", DynamicBatch: "dynamic", FixedBatch: "fixed", ElasticBatch: "elastic"
        }[type(self.policy)]
        return {
            "lam": self.lam,
            "distribution": self.distribution.to_dict(),
            "latency": self.latency.to_dict(),
            "policy": pol,
            "patience": self.patience,
            "warmup": self.warmup,
            "horizon": self.horizon,
            "seed": self.seed,
            "replications": self.replications,
        }


@dataclass(frozen=True)
class RequestRecord:
    arrival: float
    service_start: float | None
    completion: float | None
    tokens_requested: float
    tokens_served: float
    lost: bool
    batch_id: int | None = None
    batch_size: int | None = None

    @property
    def departure(self) -> float | None:
        return self.completion


@dataclass
class SimStats:
    mean_wait: float
    mean_wait_ci: float
    mean_wait_served: float
    mean_wait_served_ci: float
    loss_fraction: float
    loss_fraction_ci: float
    mean_sojourn: float
    mean_sojourn_ci: float
    # fixed batching only: time spent waiting for the batch to fill
    mean_formation_wait: float
    mean_formation_wait_ci: float
    mean_service: float
    throughput: float
    utilization: float
    n_arrivals: int
    n_served: int
    n_lost: int
    n_in_system: int
    replications: int = 1
    seed: int = 0
    # server busy nearly all the time: the queue is (close to) unstable
    saturated: bool = False
    batch_size_histogram: dict[int, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["batch_size_histogram"] = {str(k): v for k, v in sorted(self.batch_size_histogram.items())}
        return d


# -- engine -------------------------------------------------------------------------------------


class _Stream:
    """Block-buffered draws, consumed strictly in arrival order."""

    def __init__(self, draw):
        self._draw = draw
        self._buf: list[float] = []
        self._pos = 0

    def next(self) -> float:
        if self._pos == len(self._buf):
            self._buf = np.asarray(self._draw(_BLOCK), dtype=float).tolist()
            self._pos = 0
        x = self._buf[self._pos]
        self._pos += 1
        return x


class _Trace:
    __slots__ = ("arrival", "tokens", "served_tokens", "start", "completion", "lost",
                 "batch_id", "batch_size", "formation", "end_time", "busy_time", "batches")

    def __init__(self):
        self.arrival: list[float] = []
        self.tokens: list[float] = []
        self.served_tokens: list[float] = []
        self.start: list[float | None] = []
        self.completion: list[float | None] = []
        self.lost: list[bool] = []
        self.batch_id: list[int | None] = []
        self.batch_size: list[int | None] = []
        self.formation: list[float] = []
        self.end_time = 0.0
        self.busy_time = 0.0
        # (first member index, size) per started batch
        self.batches: list[tuple[int, int]] = []


def _simulate(cfg: SimConfig) -> _Trace:
    ss = np.random.SeedSequence(cfg.seed)
    arr_rng, tok_rng = (np.random.Generator(np.random.PCG64(s)) for s in ss.spawn(2))
    inter = _Stream(lambda n: arr_rng.exponential(1.0 / cfg.lam, n))
    draws = _Stream(lambda n: cfg.distribution.sample(tok_rng, n))

    pol = cfg.policy
    lat = cfg.latency
    tau = cfg.patience
    n_max = pol.n_max if isinstance(pol, SingleFCFS) else None
    if isinstance(pol, (DynamicBatch, ElasticBatch)):
        cap = pol.b_max or math.inf
    elif isinstance(pol, FixedBatch):
        cap = pol.b
    else:
        cap = 1
    need = pol.b if isinstance(pol, FixedBatch) else 1
    fixed_h = None
    if isinstance(pol, FixedBatch) and pol.service_mode == "deterministic_mean":
        fixed_h = mean_batch_time(lat, cfg.distribution, pol.b)
    elastic = isinstance(pol, ElasticBatch)
    batched = not isinstance(pol, SingleFCFS)

    tr = _Trace()
    events: list[tuple] = []
    seq = 0
    queue: deque[int] = deque()
    busy = False
    batch_no = 0
    departed = 0

    def push(t, pri, payload):
        nonlocal seq
        heapq.heappush(events, (t, pri, seq, payload))
        seq += 1

    def try_start(t):
        nonlocal busy, batch_no
        if busy or len(queue) < need:
            return
        size = int(min(len(queue), cap))
        members = [queue.popleft() for _ in range(size)]
        if not batched:
            i = members[0]
            n = tr.served_tokens[i]
            if isinstance(lat, BatchLatencyModel):
                dur = batch_service_time(lat, 1, n)
            else:
                dur = lat.a * n + lat.c
            tr.start[i] = t
            tr.completion[i] = t + dur
        else:
            toks = [tr.tokens[i] for i in members]
            if elastic:
                order = sorted(range(size), key=lambda j: toks[j])
                dur, offsets = elastic_batch_time(lat, [toks[j] for j in order])
                for rank, j in enumerate(order):
                    tr.completion[members[j]] = t + offsets[rank]
            else:
                dur = fixed_h if fixed_h is not None else batch_service_time(lat, size, max(toks))
                for i in members:
                    tr.completion[i] = t + dur
            filled = tr.arrival[members[-1]]
            for i in members:
                tr.start[i] = t
                tr.batch_id[i] = batch_no
                tr.batch_size[i] = size
                if need > 1:
                    tr.formation[i] = filled - tr.arrival[i]
        tr.batches.append((members[0], size))
        batch_no += 1
        busy = True
        tr.busy_time += dur
        push(t + dur, _COMPLETION, members)

    push(inter.next(), _ARRIVAL, None)
    horizon = cfg.horizon
    t = 0.0
    while departed < horizon:
        t, pri, _, payload = heapq.heappop(events)
        if pri == _ARRIVAL:
            i = len(tr.arrival)
            n = draws.next()
            tr.arrival.append(t)
            tr.tokens.append(n)
            tr.served_tokens.append(n if n_max is None else min(n, n_max))
            tr.start.append(None)
            tr.completion.append(None)
            tr.lost.append(False)
            tr.batch_id.append(None)
            tr.batch_size.append(None)
            tr.formation.append(0.0)
            queue.append(i)
            push(t + inter.next(), _ARRIVAL, None)
            if tau is not None:
                push(t + tau, _RENEGE, i)
            try_start(t)
        elif pri == _COMPLETION:
            busy = False
            departed += sum(1 for i in payload if i < horizon)
            try_start(t)
        else:
            i = payload
            if tr.start[i] is None:
                # deterministic patience: reneges happen in arrival order
                assert queue and queue[0] == i
                queue.popleft()
                tr.lost[i] = True
                tr.completion[i] = t
                if i < horizon:
                    departed += 1
    tr.end_time = t
    return tr


def _tci(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=float)
    arr = arr[np.isfinite(arr)]
    if arr.size == 0:
        return math.nan, math.nan
    if arr.size < 2:
        return float(arr.mean()), math.nan
    half = sps.t.ppf(0.975, arr.size - 1) * arr.std(ddof=1) / math.sqrt(arr.size)
    return float(arr.mean()), float(half)


def _summarize(cfg: SimConfig, tr: _Trace) -> SimStats:
    lo, hi = cfg.warmup, cfg.horizon
    arrival = np.asarray(tr.arrival[lo:hi])
    lost = np.asarray(tr.lost[lo:hi], dtype=bool)
    served = ~lost
    start = np.asarray([s if s is not None else np.nan for s in tr.start[lo:hi]])
    comp = np.asarray(tr.completion[lo:hi], dtype=float)
    wait = np.where(lost, cfg.patience or 0.0, start - arrival)
    formation = np.asarray(tr.formation[lo:hi])
    n_served_all = sum(1 for i, c in enumerate(tr.completion) if c is not None and not tr.lost[i])
    n_lost_all = sum(tr.lost)
    span = comp.max() - arrival[0] if arrival.size else math.nan
    hist = Counter(size for first, size in tr.batches if lo <= first < hi)
    nan = math.nan
    return SimStats(
        mean_wait=float(wait.mean()),
        mean_wait_ci=nan,
        mean_wait_served=float(wait[served].mean()) if served.any() else nan,
        mean_wait_served_ci=nan,
        loss_fraction=float(lost.mean()),
        loss_fraction_ci=nan,
        mean_sojourn=float((comp - arrival)[served].mean()) if served.any() else nan,
        mean_sojourn_ci=nan,
        mean_formation_wait=float(formation[served].mean()) if served.any() else nan,
        mean_formation_wait_ci=nan,
        mean_service=float((comp - start)[served].mean()) if served.any() else nan,
        throughput=float(served.sum() / span) if span > 0 else nan,
        utilization=tr.busy_time / tr.end_time if tr.end_time > 0 else nan,
        n_arrivals=len(tr.arrival),
        n_served=n_served_all,
        n_lost=n_lost_all,
        n_in_system=len(tr.arrival) - n_served_all - n_lost_all,
        replications=1,
        seed=cfg.seed,
        saturated=bool(tr.end_time > 0 and tr.busy_time / tr.end_time > SATURATION),
        batch_size_histogram=dict(hist),
    )


def _records(tr: _Trace) -> list[RequestRecord]:
    return [
        RequestRecord(*row)
        for row in zip(
            tr.arrival, tr.start, tr.completion, tr.tokens, tr.served_tokens,
            tr.lost, tr.batch_id, tr.batch_size,
        )
    ]


def run(config: SimConfig) -> tuple[SimStats, list[RequestRecord]]:
    """Simulate one replication; returns its statistics and the full trace.

    Statistics cover requests ``warmup <= i < horizon`` in arrival order; the
    run ends once all of them have departed.  Requests that arrived later and
    are still queued show up as ``service_start=None``.
    """
    tr = _simulate(config)
    return _summarize(config, tr), _records(tr)


def _one(cfg: SimConfig) -> SimStats:
    return _summarize(cfg, _simulate(cfg))


def replicate(config: SimConfig, workers: int = 1) -> SimStats:
    """Run ``config.replications`` runs with seeds ``seed, seed + 1, ...``.

    Point estimates are means of the per-replication means; ``*_ci`` fields
    are 95% Student-t half-widths across replications.
    """
    return _aggregate(config, _per_replication(config, workers))


def replicate_with_trace(config: SimConfig, workers: int = 1) -> tuple[SimStats, list[RequestRecord]]:
    """Like :func:`replicate`, also returning the first replication's trace."""
    first = replace(config, replications=1)
    tr = _simulate(first)
    per = [_summarize(first, tr)]
    if config.replications > 1:
        rest = replace(config, seed=config.seed + 1, replications=config.replications - 1)
        per += _per_replication(rest, workers)
    return _aggregate(config, per), _records(tr)


def _per_replication(config: SimConfig, workers: int) -> list[SimStats]:
    cfgs = [replace(config, seed=config.seed + i, replications=1) for i in range(config.replications)]
    if workers > 1 and len(cfgs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_one, cfgs))
    return [_one(c) for c in cfgs]


def _aggregate(config: SimConfig, per: Sequence[SimStats]) -> SimStats:
    out = {}
    for name in ("mean_wait", "mean_wait_served", "loss_fraction", "mean_sojourn", "mean_formation_wait"):
        out[name], out[name + "_ci"] = _tci([getattr(s, name) for s in per])
    hist: Counter[int] = Counter()
    for s in per:
        hist.update(s.batch_size_histogram)
    return SimStats(
        **out,
        mean_service=float(np.mean([s.mean_service for s in per])),
        throughput=float(np.mean([s.throughput for s in per])),
        utilization=float(np.mean([s.utilization for s in per])),
        n_arrivals=sum(s.n_arrivals for s in per),
        n_served=sum(s.n_served for s in per),
        n_lost=sum(s.n_lost for s in per),
        n_in_system=sum(s.n_in_system for s in per),
        replications=len(per),
        seed=config.seed,
        saturated=any(s.saturated for s in per),
        batch_size_histogram=dict(sorted(hist.items())),
    )


def patience_component_mc(
    lam: float,
    s_mean: float,
    tau: float,
    service: str,
    horizon: int = 200_000,
    warmup: int = 2_000,
    seed: int = 0,
) -> tuple[float, float]:
    """Simulation estimate of the exponential/deterministic patience endpoints.

    Same signature and meaning as :func:`tokenq.analytic.patience_component`
    (plus run-length controls), so it can be handed to
    :func:`tokenq.analytic.impatience_blend` as ``component``.
    """
    if service == "exponential":
        d: TokenDistribution = Exponential(s_mean)
    elif service == "deterministic":
        d = Deterministic(s_mean)
    else:
        raise InvalidArgumentError(f"unknown service kind {service!r}")
    cfg = SimConfig(lam, d, SingleLatencyModel(1.0, 0.0), SingleFCFS(), patience=tau,
                    warmup=warmup, horizon=horizon, seed=seed)
    st = _one(cfg)
    return st.loss_fraction, st.mean_wait


def write_trace_csv(records: Sequence[RequestRecord], path: str | Path) -> None:
    def fmt(v):
        if v is None:
            return ""
        if isinstance(v, bool):
            return "1" if v else "0"
        return repr(float(v)) if isinstance(v, float) else str(v)

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        names = [f.name for f in fields(RequestRecord)]
        for r in records:
            w.writerow([fmt(getattr(r, n)) for n in names])
