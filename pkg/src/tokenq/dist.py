"""Token-count distributions.

Every law here describes the number of output (or input) tokens of a
request.  Counts are treated as continuous nonnegative reals; the
empirical kind keeps exact discrete sums.

The quantities the queueing models need are:

* clipped moments ``E[min(N, n)]`` and ``E[min(N, n)^2]``,
* the mean of the largest of ``b`` i.i.d. draws (padding length of a batch),
* the mean utility ``E[u]`` of a token limit, with ``u = min(1, n / N)``.

Continuous laws compute these by adaptive quadrature in the base class;
subclasses override with closed forms where one exists, which the tests
cross-check against the quadrature path.
"""

from __future__ import annotations

import csv
import math
from abc import ABC, abstractmethod
from collections.abc import Iterable, Mapping, Sequence
from pathlib import Path
from typing import Any, ClassVar

import numpy as np
from scipy import integrate, special, stats

from .errors import InvalidArgumentError, NumericalFailureError

__all__ = [
    "TokenDistribution",
    "Deterministic",
    "Uniform",
    "TruncatedGaussian",
    "LogNormal",
    "Exponential",
    "Empirical",
    "cdf",
    "clipped_moments",
    "max_order_stat_mean",
    "clipped_utility_mean",
    "sample",
    "from_spec",
    "load_empirical",
]

QUAD_EPSABS = 1e-9
QUAD_EPSREL = 1e-8
QUAD_LIMIT = 200
# upper end of the quadrature range for unbounded laws
TAIL_QUANTILE = 0.999999


def _quad(func, lo: float, hi: float, points: Sequence[float] | None = None) -> float:
    if hi <= lo:
        return 0.0
    kw: dict[str, Any] = {"epsabs": QUAD_EPSABS, "epsrel": QUAD_EPSREL, "limit": QUAD_LIMIT}
    if points is not None and math.isfinite(lo) and math.isfinite(hi):
        inner = sorted({p for p in points if lo < p < hi})
        if inner:
            kw["points"] = inner
    value, err = integrate.quad(func, lo, hi, **kw)
    if not math.isfinite(value):
        raise NumericalFailureError(f"quadrature on [{lo}, {hi}] returned {value}")
    if err > max(1e-6, 1e-5 * abs(value)):
        raise NumericalFailureError(
            f"quadrature on [{lo}, {hi}] did not converge (estimate {value}, error {err})"
        )
    return value


def _check_n_max(n_max: float) -> float:
    n_max = float(n_max)
    if not n_max >= 1:
        raise InvalidArgumentError(f"n_max must be >= 1, got {n_max}")
    return n_max


def _check_b(b: int) -> int:
    if isinstance(b, bool) or int(b) != b or b < 1:
        raise InvalidArgumentError(f"batch size must be a positive integer, got {b!r}")
    return int(b)


class TokenDistribution(ABC):
    """Law of a nonnegative token count ``N``."""

    kind: ClassVar[str]

    # -- required by subclasses -------------------------------------------
    @abstractmethod
    def cdf(self, x):
        """``P(N <= x)``; zero for ``x < 0``. Accepts scalars or arrays."""

    @abstractmethod
    def ppf(self, p):
        """Quantile function (generalized inverse of the CDF)."""

    @abstractmethod
    def mean(self) -> float: ...

    @abstractmethod
    def second_moment(self) -> float: ...

    @abstractmethod
    def sample(self, rng: np.random.Generator, size: int | None = None):
        """Draw from the law using ``rng``; returns a float or an array."""

    @abstractmethod
    def to_dict(self) -> dict[str, Any]: ...

    # -- shared behaviour ---------------------------------------------------
    @property
    def upper(self) -> float:
        """Supremum of the support (``inf`` when unbounded)."""
        return math.inf

    def sf(self, x):
        return 1.0 - self.cdf(x)

    def isf(self, q):
        return self.ppf(1.0 - np.asarray(q, dtype=float))

    def pdf(self, x):
        raise NotImplementedError(f"{self.kind} has no density")

    def var(self) -> float:
        return max(self.second_moment() - self.mean() ** 2, 0.0)

    def _breakpoints(self) -> list[float]:
        return [float(self.ppf(q)) for q in (0.5, 0.9, 0.99, 0.999)]

    def clipped_moments(self, n_max: float) -> tuple[float, float]:
        """Return ``(E[min(N, n_max)], E[min(N, n_max)^2])``.

        Uses the survival-function forms ``int_0^n S(x) dx`` and
        ``int_0^n 2 x S(x) dx``, which need no density.
        """
        n = _check_n_max(n_max)
        hi = min(n, self.upper)
        tail = float(self.ppf(TAIL_QUANTILE))
        pts = self._breakpoints()
        sf = lambda x: float(self.sf(x))  # noqa: E731
        m1 = _quad(sf, 0.0, min(hi, tail), pts) + _quad(sf, min(hi, tail), hi)
        m2 = _quad(lambda x: 2.0 * x * sf(x), 0.0, min(hi, tail), pts) + _quad(
            lambda x: 2.0 * x * sf(x), min(hi, tail), hi
        )
        return m1, m2

    def max_order_stat_mean(self, b: int) -> float:
        """Mean of the maximum of ``b`` independent draws.

        Integrated in the probability domain: with ``t = F(x)^b`` the mean
        becomes ``int_0^1 Q(t^(1/b)) dt``, which keeps the mass of the
        integrand spread out for large ``b``.
        """
        b = _check_b(b)
        if b == 1:
            return self.mean()

        def integrand(t: float) -> float:
            if t <= 0.0:
                return float(self.ppf(0.0))
            return float(self.isf(-math.expm1(math.log(t) / b)))

        return _quad(integrand, 0.0, 1.0)

    def clipped_utility_mean(self, n_max: float) -> float:
        """``E[u]`` with ``u = 1`` if ``N <= n_max`` else ``n_max / N``."""
        n = _check_n_max(n_max)
        if n >= self.upper:
            return 1.0
        tail = max(float(self.ppf(TAIL_QUANTILE)), n)
        pts = [p for p in self._breakpoints() if p > n]
        inv = _quad(lambda x: float(self.pdf(x)) / x, n, tail, pts)
        if math.isinf(self.upper):
            inv += _quad(lambda x: float(self.pdf(x)) / x, tail, math.inf)
        else:
            inv += _quad(lambda x: float(self.pdf(x)) / x, tail, self.upper)
        return float(min(1.0, self.cdf(n) + n * inv))

    def __repr__(self) -> str:
        args = ", ".join(f"{k}={v!r}" for k, v in self.to_dict().items() if k != "kind")
        return f"{type(self).__name__}({args})"

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TokenDistribution):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def __hash__(self) -> int:
        return hash(repr(self))


class Deterministic(TokenDistribution):
    kind = "deterministic"

    def __init__(self, n: float):
        n = float(n)
        if not (n >= 0 and math.isfinite(n)):
            raise InvalidArgumentError(f"deterministic count must be finite and >= 0, got {n}")
        self.n = n

    @property
    def upper(self) -> float:
        return self.n

    def cdf(self, x):
        return np.where(np.asarray(x, dtype=float) >= self.n, 1.0, 0.0)[()]

    def ppf(self, p):
        return np.full_like(np.asarray(p, dtype=float), self.n)[()]

    def mean(self) -> float:
        return self.n

    def second_moment(self) -> float:
        return self.n**2

    def clipped_moments(self, n_max: float) -> tuple[float, float]:
        m = min(self.n, _check_n_max(n_max))
        return m, m * m

    def max_order_stat_mean(self, b: int) -> float:
        _check_b(b)
        return self.n

    def clipped_utility_mean(self, n_max: float) -> float:
        n = _check_n_max(n_max)
        return 1.0 if self.n <= n else n / self.n

    def sample(self, rng, size=None):
        if size is None:
            return self.n
        return np.full(size, self.n)

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "value": self.n}


class _Continuous(TokenDistribution):
    """Shared plumbing for laws backed by a frozen ``scipy.stats`` object."""

    _rv: Any

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        return np.where(x < 0, 0.0, self._rv.cdf(np.maximum(x, 0.0)))[()]

    def sf(self, x):
        x = np.asarray(x, dtype=float)
        return np.where(x < 0, 1.0, self._rv.sf(np.maximum(x, 0.0)))[()]

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        return np.where(x < 0, 0.0, self._rv.pdf(np.maximum(x, 0.0)))[()]

    def ppf(self, p):
        return self._rv.ppf(p)

    def isf(self, q):
        return self._rv.isf(q)

    def mean(self) -> float:
        return float(self._rv.mean())

    def second_moment(self) -> float:
        return float(self._rv.var() + self._rv.mean() ** 2)


class Uniform(_Continuous):
    """Uniform on ``[0, m]``."""

    kind = "uniform"

    def __init__(self, m: float):
        m = float(m)
        if not (m > 0 and math.isfinite(m)):
            raise InvalidArgumentError(f"uniform upper bound must be > 0, got {m}")
        self.m = m
        self._rv = stats.uniform(loc=0.0, scale=m)

    @property
    def upper(self) -> float:
        return self.m

    def mean(self) -> float:
        return self.m / 2

    def second_moment(self) -> float:
        return self.m**2 / 3

    def clipped_moments(self, n_max: float) -> tuple[float, float]:
        n = min(_check_n_max(n_max), self.m)
        # E[min(N,n)] = n - n^2/(2m); E[min(N,n)^2] = n^2 - 2 n^3 / (3 m)
        return n - n * n / (2 * self.m), n * n - 2 * n**3 / (3 * self.m)

    def max_order_stat_mean(self, b: int) -> float:
        b = _check_b(b)
        return self.m * b / (b + 1)

    def clipped_utility_mean(self, n_max: float) -> float:
        n = _check_n_max(n_max)
        if n >= self.m:
            return 1.0
        return n / self.m + n * math.log(self.m / n) / self.m

    def sample(self, rng, size=None):
        return rng.uniform(0.0, self.m, size)

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "high": self.m}


class TruncatedGaussian(_Continuous):
    """Gaussian with location ``u`` and scale ``sigma`` truncated to ``[0, inf)``.

    ``u`` and ``sigma`` are the parameters of the parent Gaussian, not the
    moments of the truncated law.
    """

    kind = "truncated_gaussian"

    def __init__(self, u: float, sigma: float):
        u, sigma = float(u), float(sigma)
        if not (sigma > 0 and math.isfinite(sigma) and math.isfinite(u)):
            raise InvalidArgumentError(f"need finite u and sigma > 0, got u={u}, sigma={sigma}")
        self.u = u
        self.sigma = sigma
        self._rv = stats.truncnorm(a=-u / sigma, b=math.inf, loc=u, scale=sigma)
        self._order_cache: dict[int, float] = {}

    def _breakpoints(self) -> list[float]:
        return [max(self.u, 0.0)] + super()._breakpoints()

    # scipy's truncnorm is slow per call; the scalar paths below use ndtr directly
    def _log_cdf_z(self, z: float) -> float:
        z0 = -self.u / self.sigma
        num = special.ndtr(-z0) - special.ndtr(-z) if z0 > 0 else special.ndtr(z) - special.ndtr(z0)
        if num <= 0:
            return -math.inf
        return math.log(num) - special.log_ndtr(-z0)

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        z0 = -self.u / self.sigma
        z = (np.maximum(x, 0.0) - self.u) / self.sigma
        num = np.where(z0 > 0, special.ndtr(-z0) - special.ndtr(-z), special.ndtr(z) - special.ndtr(z0))
        return np.where(x < 0, 0.0, np.clip(num / special.ndtr(-z0), 0.0, 1.0))[()]

    def sf(self, x):
        x = np.asarray(x, dtype=float)
        z = (np.maximum(x, 0.0) - self.u) / self.sigma
        return np.where(x < 0, 1.0, np.minimum(special.ndtr(-z) / special.ndtr(self.u / self.sigma), 1.0))[()]

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        z = (x - self.u) / self.sigma
        dens = np.exp(-0.5 * z * z) / (math.sqrt(2 * math.pi) * self.sigma * special.ndtr(self.u / self.sigma))
        return np.where(x < 0, 0.0, dens)[()]

    def max_order_stat_mean(self, b: int) -> float:
        b = _check_b(b)
        if b == 1:
            return self.mean()
        cached = self._order_cache.get(b)
        if cached is not None:
            return cached
        z0 = -self.u / self.sigma

        # E[max] = sigma * int_{z0}^{inf} (1 - F(z)^b) dz, F the truncated CDF in z units
        def integrand(z: float) -> float:
            return -math.expm1(b * self._log_cdf_z(z))

        z_med = max(z0, float(special.ndtri(0.5 ** (1 / b))))
        z_hi = max(z0, float(special.ndtri(1 - 1e-13 / b))) + 2.0
        val = _quad(integrand, z0, z_hi, [z_med, z_med + 1, z_med + 2])
        self._order_cache[b] = self.sigma * val
        return self._order_cache[b]

    def sample(self, rng, size=None):
        # inverse CDF of the truncated law
        return self._rv.rvs(size=size, random_state=rng)

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "mean": self.u, "sd": self.sigma}


class LogNormal(_Continuous):
    """``exp(Normal(mu, sigma))``; ``mu`` and ``sigma`` are on the log scale."""

    kind = "lognormal"

    def __init__(self, mu: float, sigma: float):
        mu, sigma = float(mu), float(sigma)
        if not (sigma > 0 and math.isfinite(sigma) and math.isfinite(mu)):
            raise InvalidArgumentError(f"need finite log_mean and log_sd > 0, got {mu}, {sigma}")
        self.mu = mu
        self.sigma = sigma
        self._rv = stats.lognorm(s=sigma, scale=math.exp(mu))
        self._order_cache: dict[int, float] = {}

    def _partial(self, k: int, n: float) -> float:
        """``E[N^k ; N <= n]``."""
        mu, s = self.mu, self.sigma
        z = (math.log(n) - mu - k * s * s) / s
        return math.exp(k * mu + 0.5 * k * k * s * s) * special.ndtr(z)

    def mean(self) -> float:
        return math.exp(self.mu + 0.5 * self.sigma**2)

    def second_moment(self) -> float:
        return math.exp(2 * self.mu + 2 * self.sigma**2)

    def clipped_moments(self, n_max: float) -> tuple[float, float]:
        n = _check_n_max(n_max)
        if math.isinf(n):
            return self.mean(), self.second_moment()
        tail = float(self.sf(n))
        return float(self._partial(1, n) + n * tail), float(self._partial(2, n) + n * n * tail)

    def max_order_stat_mean(self, b: int) -> float:
        b = _check_b(b)
        if b == 1:
            return self.mean()
        if b in self._order_cache:
            return self._order_cache[b]
        mu, s = self.mu, self.sigma

        # Gaussian space: E = int exp(mu + s z) b Phi(z)^(b-1) phi(z) dz
        def integrand(z: float) -> float:
            return math.exp(mu + s * z + (b - 1) * special.log_ndtr(z) - 0.5 * z * z)

        z_hi = max(12.0, float(special.ndtri(1 - 1e-12 / b)) + 4 * s + 4)
        val = _quad(integrand, -12.0, z_hi, [0.0, s, float(special.ndtri(0.5 ** (1 / b)))])
        self._order_cache[b] = b * val / math.sqrt(2 * math.pi)
        return self._order_cache[b]

    def clipped_utility_mean(self, n_max: float) -> float:
        n = _check_n_max(n_max)
        if math.isinf(n):
            return 1.0
        mu, s = self.mu, self.sigma
        # E[1/N ; N > n] = exp(-mu + s^2/2) * Phi((mu - s^2 - ln n) / s)
        inv = math.exp(-mu + 0.5 * s * s) * special.ndtr((mu - s * s - math.log(n)) / s)
        return float(min(1.0, self.cdf(n) + n * inv))

    def sample(self, rng, size=None):
        return rng.lognormal(self.mu, self.sigma, size)

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "log_mean": self.mu, "log_sd": self.sigma}


class Exponential(_Continuous):
    """Exponential with the given mean.

    Not a realistic token law; it exists so the simulator can reproduce
    exponential-service (M/M/1) reference results.
    """

    kind = "exponential"

    def __init__(self, mean: float):
        mean = float(mean)
        if not (mean > 0 and math.isfinite(mean)):
            raise InvalidArgumentError(f"exponential mean must be > 0, got {mean}")
        self.theta = mean
        self._rv = stats.expon(scale=mean)

    def mean(self) -> float:
        return self.theta

    def second_moment(self) -> float:
        return 2 * self.theta**2

    def clipped_moments(self, n_max: float) -> tuple[float, float]:
        n = _check_n_max(n_max)
        if math.isinf(n):
            return self.mean(), self.second_moment()
        th = self.theta
        e = math.exp(-n / th)
        return -th * math.expm1(-n / th), 2 * th * th * (1 - e * (1 + n / th))

    def max_order_stat_mean(self, b: int) -> float:
        b = _check_b(b)
        return self.theta * math.fsum(1.0 / k for k in range(1, b + 1))

    def clipped_utility_mean(self, n_max: float) -> float:
        n = _check_n_max(n_max)
        if math.isinf(n):
            return 1.0
        x = n / self.theta
        return float(min(1.0, -math.expm1(-x) + x * special.exp1(x)))

    def sample(self, rng, size=None):
        return rng.exponential(self.theta, size)

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "mean": self.theta}


class Empirical(TokenDistribution):
    """Finite discrete law on sorted support points; ties are merged."""

    kind = "empirical"

    def __init__(self, values: Iterable[float], probabilities: Iterable[float]):
        v = np.asarray(list(values), dtype=float)
        p = np.asarray(list(probabilities), dtype=float)
        if v.ndim != 1 or v.shape != p.shape or v.size == 0:
            raise InvalidArgumentError("values and probabilities must be equal-length, nonempty")
        if np.any(~np.isfinite(v)) or np.any(v < 0):
            raise InvalidArgumentError("empirical support must be finite and nonnegative")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise InvalidArgumentError(f"probabilities must be >= 0 and sum to 1, got sum {p.sum()!r}")
        uniq, inverse = np.unique(v, return_inverse=True)
        merged = np.zeros(uniq.size)
        np.add.at(merged, inverse, p)
        keep = merged > 0
        self.values = uniq[keep]
        self.probabilities = merged[keep]
        self._cum = np.cumsum(self.probabilities)
        self._cum[-1] = 1.0

    @classmethod
    def from_samples(cls, samples: Iterable[float]) -> Empirical:
        arr = np.asarray(list(samples), dtype=float)
        if arr.size == 0:
            raise InvalidArgumentError("cannot build an empirical law from zero samples")
        uniq, counts = np.unique(arr, return_counts=True)
        return cls(uniq, counts / counts.sum())

    @property
    def upper(self) -> float:
        return float(self.values[-1])

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        idx = np.searchsorted(self.values, x, side="right")
        cum = np.concatenate(([0.0], self._cum))
        return cum[idx][()]

    def ppf(self, p):
        p = np.asarray(p, dtype=float)
        idx = np.searchsorted(self._cum, p, side="left")
        return self.values[np.minimum(idx, self.values.size - 1)][()]

    def mean(self) -> float:
        return float(np.dot(self.values, self.probabilities))

    def second_moment(self) -> float:
        return float(np.dot(self.values**2, self.probabilities))

    def clipped_moments(self, n_max: float) -> tuple[float, float]:
        c = np.minimum(self.values, _check_n_max(n_max))
        return float(np.dot(c, self.probabilities)), float(np.dot(c * c, self.probabilities))

    def max_order_stat_mean(self, b: int) -> float:
        b = _check_b(b)
        prev = np.concatenate(([0.0], self._cum[:-1]))
        weights = self._cum**b - prev**b
        return float(np.dot(self.values, weights))

    def clipped_utility_mean(self, n_max: float) -> float:
        n = _check_n_max(n_max)
        v = self.values
        u = np.ones_like(v)
        over = v > n
        u[over] = n / v[over]
        return float(np.dot(u, self.probabilities))

    def sample(self, rng, size=None):
        u = rng.random(size)
        idx = np.searchsorted(self._cum, u, side="right")
        out = self.values[np.minimum(idx, self.values.size - 1)]
        return float(out) if size is None else out

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "values": self.values.tolist(),
            "probabilities": self.probabilities.tolist(),
        }


# -- module-level operations -------------------------------------------------


def cdf(d: TokenDistribution, x):
    return d.cdf(x)


def clipped_moments(d: TokenDistribution, n_max: float) -> tuple[float, float]:
    return d.clipped_moments(n_max)


def max_order_stat_mean(d: TokenDistribution, b: int) -> float:
    return d.max_order_stat_mean(b)


def clipped_utility_mean(d: TokenDistribution, n_max: float) -> float:
    return d.clipped_utility_mean(n_max)


def sample(d: TokenDistribution, rng: np.random.Generator, size: int | None = None):
    return d.sample(rng, size)


# -- parsing -------------------------------------------------------------------


def load_empirical(path: str | Path) -> Empirical:
    """Read a ``tokens,probability`` CSV or a file with one count per line."""
    path = Path(path)
    lines = [ln.strip() for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise InvalidArgumentError(f"{path}: empty file")
    if "," in lines[0]:
        reader = csv.DictReader(lines)
        if reader.fieldnames is None or {"tokens", "probability"} - set(reader.fieldnames):
            raise InvalidArgumentError(f"{path}: expected header 'tokens,probability'")
        try:
            rows = [(float(r["tokens"]), float(r["probability"])) for r in reader]
        except (TypeError, ValueError) as exc:
            raise InvalidArgumentError(f"{path}: {exc}") from exc
        return Empirical([r[0] for r in rows], [r[1] for r in rows])
    try:
        return Empirical.from_samples(float(x) for x in lines)
    except ValueError as exc:
        raise InvalidArgumentError(f"{path}: {exc}") from exc


def _get(spec: Mapping[str, Any], *names: str) -> float:
    for name in names:
        if name in spec:
            return spec[name]
    raise InvalidArgumentError(f"distribution spec {dict(spec)!r} is missing {names[0]!r}")


def from_spec(spec: Mapping[str, Any] | TokenDistribution, base_dir: str | Path = ".") -> TokenDistribution:
    """Build a distribution from a config mapping.

    >>> from_spec({"kind": "lognormal", "log_mean": 7, "log_sd": 0.7})
    LogNormal(log_mean=7.0, log_sd=0.7)
    """
    if isinstance(spec, TokenDistribution):
        return spec
    if not isinstance(spec, Mapping) or "kind" not in spec:
        raise InvalidArgumentError(f"distribution spec must be a mapping with 'kind', got {spec!r}")
    kind = spec["kind"]
    if kind == "deterministic":
        return Deterministic(_get(spec, "value", "n"))
    if kind == "uniform":
        if float(spec.get("low", 0.0)) != 0.0:
            raise InvalidArgumentError("uniform token laws start at 0")
        return Uniform(_get(spec, "high", "m"))
    if kind == "truncated_gaussian":
        return TruncatedGaussian(_get(spec, "mean", "u"), _get(spec, "sd", "sigma"))
    if kind == "lognormal":
        return LogNormal(_get(spec, "log_mean", "mu"), _get(spec, "log_sd", "sigma"))
    if kind == "exponential":
        return Exponential(_get(spec, "mean"))
    if kind == "empirical":
        if "values" in spec:
            return Empirical(spec["values"], spec["probabilities"])
        src = spec.get("csv") or spec.get("samples") or spec.get("path")
        if src is None:
            raise InvalidArgumentError("empirical spec needs 'values'/'probabilities' or a file path")
        p = Path(src)
        return load_empirical(p if p.is_absolute() else Path(base_dir) / p)
    raise InvalidArgumentError(f"unknown distribution kind {kind!r}")
