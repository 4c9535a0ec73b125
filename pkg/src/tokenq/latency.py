"""Linear inference-latency models and their calibration.

A single request producing ``n`` output tokens takes ``a * n + c`` seconds.
A padded batch of ``b`` requests whose longest reply has ``l`` tokens takes
``k1 * b + k2 + k3 * b * l + k4 * l`` seconds: ``k1 * b + k2`` for the
prefill/first token and ``(k3 * b + k4)`` per decode step.
"""

from __future__ import annotations

import csv
import math
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .dist import TokenDistribution
from .errors import EnvelopeViolationError, InvalidArgumentError

__all__ = [
    "SingleLatencyModel",
    "BatchLatencyModel",
    "LinearEnvelope",
    "CalibrationRow",
    "single_service_time",
    "fit_single",
    "fit_batch",
    "batch_service_time",
    "mean_batch_time",
    "linearize",
    "elastic_batch_time",
    "flattening_batch_size",
    "read_calibration_csv",
    "model_from_dict",
]

CALIBRATION_HEADER = ("input_tokens", "output_tokens", "batch_size", "latency_s")


@dataclass(frozen=True)
class SingleLatencyModel:
    """``S = a * n + c`` for one request with ``n`` output tokens."""

    a: float
    c: float

    def __post_init__(self):
        if not (self.a > 0 and math.isfinite(self.a)):
            raise InvalidArgumentError(f"slope a must be > 0, got {self.a}")
        if not (self.c >= 0 and math.isfinite(self.c)):
            raise InvalidArgumentError(f"intercept c must be >= 0, got {self.c}")

    def service_time(self, n):
        return self.a * np.asarray(n, dtype=float)[()] + self.c

    def to_dict(self) -> dict[str, float]:
        return {"type": "single", **asdict(self)}


@dataclass(frozen=True)
class BatchLatencyModel:
    """Padded batch time ``k1 b + k2 + k3 b l + k4 l``."""

    k1: float
    k2: float
    k3: float
    k4: float

    def __post_init__(self):
        if not (self.k1 > 0 and math.isfinite(self.k1)):
            raise InvalidArgumentError(f"k1 must be > 0, got {self.k1}")
        for name in ("k2", "k3", "k4"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise InvalidArgumentError(f"{name} must be >= 0, got {v}")

    def as_single(self) -> SingleLatencyModel:
        """The ``b = 1`` reduction: ``a = k3 + k4``, ``c = k1 + k2``."""
        return SingleLatencyModel(self.k3 + self.k4, self.k1 + self.k2)

    def to_dict(self) -> dict[str, float]:
        return {"type": "batch", **asdict(self)}


@dataclass(frozen=True)
class LinearEnvelope:
    """``alpha * b + beta`` upper envelope of the mean batch time."""

    alpha: float
    beta: float
    b_ref: int | None = None
    heavy_tail: bool = False

    def __post_init__(self):
        if not self.alpha > 0:
            raise InvalidArgumentError(f"alpha must be > 0, got {self.alpha}")
        if not self.beta >= 0:
            raise InvalidArgumentError(f"beta must be >= 0, got {self.beta}")

    def __call__(self, b):
        return self.alpha * b + self.beta


def model_from_dict(data: dict) -> SingleLatencyModel | BatchLatencyModel:
    kind = data.get("type")
    if kind is None:
        kind = "batch" if "k1" in data else "single"
    try:
        if kind == "single":
            return SingleLatencyModel(float(data["a"]), float(data["c"]))
        if kind == "batch":
            return BatchLatencyModel(*(float(data[k]) for k in ("k1", "k2", "k3", "k4")))
    except KeyError as exc:
        raise InvalidArgumentError(f"latency model missing field {exc}") from exc
    raise InvalidArgumentError(f"unknown latency model type {kind!r}")


# -- single requests -------------------------------------------------------------


def single_service_time(m: SingleLatencyModel, n) -> float:
    if np.any(np.asarray(n) < 0):
        raise InvalidArgumentError("token count must be >= 0")
    return m.service_time(n)


def _lstsq(design: np.ndarray, t: np.ndarray, names: Sequence[str]) -> tuple[np.ndarray, float]:
    if np.linalg.matrix_rank(design) < design.shape[1]:
        raise InvalidArgumentError(f"rank-deficient calibration design for {', '.join(names)}")
    coef, *_ = np.linalg.lstsq(design, t, rcond=None)
    resid = t - design @ coef
    return coef, float(np.max(np.abs(resid)))


def fit_single(points: Iterable[tuple[float, float]]) -> tuple[SingleLatencyModel, float]:
    """Least-squares fit of ``t = a n + c``.

    Returns the model and the largest absolute residual.
    """
    pts = np.asarray(list(points), dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
        raise InvalidArgumentError("need at least two (tokens, seconds) points")
    n, t = pts[:, 0], pts[:, 1]
    if np.unique(n).size < 2:
        raise InvalidArgumentError("all token counts are equal; slope is unidentifiable")
    (a, c), max_resid = _lstsq(np.column_stack([n, np.ones_like(n)]), t, ("a", "c"))
    return SingleLatencyModel(float(a), float(c)), max_resid


def fit_batch(points: Iterable[tuple[float, float, float]]) -> tuple[BatchLatencyModel, float]:
    """Least-squares fit of the four-term batch model on ``(b, l, t)`` rows."""
    pts = np.asarray(list(points), dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 4:
        raise InvalidArgumentError("need at least four (batch, tokens, seconds) rows")
    b, l, t = pts.T
    design = np.column_stack([b, np.ones_like(b), b * l, l])
    k, max_resid = _lstsq(design, t, ("k1", "k2", "k3", "k4"))
    return BatchLatencyModel(*(float(v) for v in k)), max_resid


@dataclass(frozen=True)
class CalibrationRow:
    input_tokens: float
    output_tokens: float
    batch_size: int
    latency_s: float


def read_calibration_csv(path: str | Path) -> list[CalibrationRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(CALIBRATION_HEADER) - set(reader.fieldnames):
            raise InvalidArgumentError(f"{path}: header must contain {','.join(CALIBRATION_HEADER)}")
        rows = []
        for i, r in enumerate(reader, start=2):
            try:
                rows.append(
                    CalibrationRow(
                        float(r["input_tokens"]),
                        float(r["output_tokens"]),
                        int(r["batch_size"]),
                        float(r["latency_s"]),
                    )
                )
            except (TypeError, ValueError) as exc:
                raise InvalidArgumentError(f"{path}:{i}: {exc}") from exc
    if not rows:
        raise InvalidArgumentError(f"{path}: no data rows")
    return rows


# -- batches -------------------------------------------------------------------------


def batch_service_time(m: BatchLatencyModel, b: int, l: float) -> float:
    if b < 1:
        raise InvalidArgumentError(f"batch size must be >= 1, got {b}")
    if l < 0:
        raise InvalidArgumentError(f"token count must be >= 0, got {l}")
    return m.k1 * b + m.k2 + m.k3 * b * l + m.k4 * l


def mean_batch_time(m: BatchLatencyModel, d: TokenDistribution, b: int) -> float:
    """Mean padded batch time: the batch pads to its longest reply."""
    el = d.max_order_stat_mean(b)
    return m.k1 * b + m.k2 + (m.k3 * b + m.k4) * el


def flattening_batch_size(d: TokenDistribution, tol: float = 0.01, cap: int = 512) -> int:
    """Smallest ``b`` whose next increment of ``E[L(b)]`` is below ``tol * E[L(b)]``."""
    prev = d.max_order_stat_mean(1)
    for b in range(1, cap):
        nxt = d.max_order_stat_mean(b + 1)
        if nxt - prev < tol * prev:
            return b
        prev = nxt
    return cap


def linearize(
    m: BatchLatencyModel, d: TokenDistribution, b_check: int = 128
) -> LinearEnvelope:
    """Upper linear envelope ``alpha b + beta`` of ``mean_batch_time``.

    Bounded laws use the support maximum as the padded length.  Unbounded
    laws use ``E[L]`` at the larger of the flattening batch size and
    ``b_check``, so the envelope holds over ``1..b_check``; the flattening
    size is still reported and drives the heavy-tail flag.

    Raises:
        EnvelopeViolationError: if the envelope dips below the mean batch
            time anywhere in ``1..b_check``.
    """
    if b_check < 1:
        raise InvalidArgumentError("b_check must be >= 1")
    b_ref = flattening_batch_size(d)
    heavy = d.max_order_stat_mean(2 * b_ref) / d.max_order_stat_mean(b_ref) > 1.05
    if math.isfinite(d.upper):
        l_bar = d.upper
    else:
        l_bar = max(d.max_order_stat_mean(b_ref), d.max_order_stat_mean(b_check))
    env = LinearEnvelope(m.k1 + m.k3 * l_bar, m.k2 + m.k4 * l_bar, b_ref=b_ref, heavy_tail=heavy)
    for b in range(1, b_check + 1):
        actual = mean_batch_time(m, d, b)
        bound = env(b)
        if bound < actual * (1 - 1e-12):
            raise EnvelopeViolationError(b, bound, actual)
    return env


def elastic_batch_time(
    m: BatchLatencyModel, counts: Sequence[float]
) -> tuple[float, list[float]]:
    """Batch time when each reply leaves as soon as its own tokens are done.

    ``counts`` must be sorted ascending.  After the shared prefill the batch
    decodes with ``b`` members until the shortest reply finishes, then with
    ``b - 1`` members, and so on.

    Returns:
        ``(total, offsets)`` where ``offsets[i]`` is the completion time of
        the ``i``-th shortest reply measured from the batch start.
    """
    b = len(counts)
    if b < 1:
        raise InvalidArgumentError("elastic batch needs at least one request")
    if any(x < 0 for x in counts):
        raise InvalidArgumentError("token counts must be >= 0")
    if any(counts[i] > counts[i + 1] for i in range(b - 1)):
        raise InvalidArgumentError("token counts must be sorted ascending")
    t = m.k1 * b + m.k2
    prev = 0.0
    offsets = []
    for j, n in enumerate(counts):
        t += (m.k3 * (b - j) + m.k4) * (n - prev)
        prev = n
        offsets.append(t)
    total = m.k1 * b + m.k2 + m.k3 * math.fsum(counts) + m.k4 * counts[-1]
    return total, offsets
