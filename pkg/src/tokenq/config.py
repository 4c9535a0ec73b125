"""Run configuration files.

One YAML (or JSON) document with up to five sections::

    workload:
      arrival_rate: 0.025          # or a list to sweep
      tokens: {kind: lognormal, log_mean: 7, log_sd: 0.7}
    latency:
      type: single                 # or batch with k1..k4
      a: 0.023
      c: 0.19
      # alternatives: `calibration: file.csv` (fit on load) or
      # `model: model.json` (output of `tokenq fit`)
    policy:
      kind: single                 # single | dynamic | fixed | elastic
      n_max: 1600                  # single; scalar or list
      patience: 60                 # single only
      b: 8                         # fixed; scalar or list
      b_max: null                  # dynamic / elastic
      service_mode: deterministic_mean
    objective:
      variant: V1                  # V1 | V2 | batch
      theta: 0.9916667
      loss_cost: 4
      tau: 60
      grid: {start: 100, stop: 3000, step: 100}
      b_range: {start: 1, stop: 128}
    sim:
      seed: 0
      replications: 5
      horizon: 100000
      warmup: 1000
      workers: 1

Relative paths resolve against the config file's directory.  The
``TOKENQ_SEED`` environment variable overrides ``sim.seed``.
"""

from __future__ import annotations

import hashlib
import json
import os
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .dist import TokenDistribution, from_spec
from .errors import InvalidArgumentError
from .latency import (
    BatchLatencyModel,
    SingleLatencyModel,
    fit_batch,
    fit_single,
    model_from_dict,
    read_calibration_csv,
)

__all__ = ["RunConfig", "load_config", "parse_config", "config_hash", "fit_rows", "SEED_ENV"]

SEED_ENV = "TOKENQ_SEED"
SECTIONS = ("workload", "latency", "policy", "objective", "sim")
POLICY_KINDS = ("single", "dynamic", "fixed", "elastic")


@dataclass
class RunConfig:
    lams: list[float]
    distribution: TokenDistribution
    latency: SingleLatencyModel | BatchLatencyModel
    policy_kind: str = "single"
    n_max: list[float | None] = field(default_factory=lambda: [None])
    patience: float | None = None
    b: list[int] = field(default_factory=list)
    b_max: int | None = None
    service_mode: str = "deterministic_mean"
    objective: dict[str, Any] = field(default_factory=dict)
    seed: int = 0
    replications: int = 5
    horizon: int = 100_000
    warmup: int = 1_000
    workers: int = 1

    def resolved(self) -> dict[str, Any]:
        """Canonical plain-data form; the config hash is taken over this."""
        objective = {k: _compact(v) if k in ("grid", "b_range") else v for k, v in self.objective.items()}
        return {
            "workload": {"arrival_rate": self.lams, "tokens": self.distribution.to_dict()},
            "latency": self.latency.to_dict(),
            "policy": {
                "kind": self.policy_kind,
                "n_max": self.n_max,
                "patience": self.patience,
                "b": self.b,
                "b_max": self.b_max,
                "service_mode": self.service_mode,
            },
            "objective": objective,
            "sim": {
                "seed": self.seed,
                "replications": self.replications,
                "horizon": self.horizon,
                "warmup": self.warmup,
            },
        }


def _compact(values: list) -> Any:
    """Arithmetic progressions collapse to ``{start, stop, step}``."""
    if len(values) < 3:
        return values
    step = values[1] - values[0]
    if step > 0 and all(abs((y - x) - step) <= 1e-9 * max(1.0, abs(step)) for x, y in zip(values, values[1:])):
        return {"start": values[0], "stop": values[-1], "step": step}
    return values


def config_hash(resolved: Mapping[str, Any]) -> str:
    blob = json.dumps(resolved, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(blob.encode()).hexdigest()


def _as_list(v, conv) -> list:
    items = v if isinstance(v, (list, tuple)) else [v]
    try:
        return [conv(x) for x in items]
    except (TypeError, ValueError) as exc:
        raise InvalidArgumentError(f"bad value in {v!r}: {exc}") from exc


def _range(spec, default: tuple[float, float, float] | None, conv=float) -> list:
    if spec is None:
        if default is None:
            return []
        spec = dict(zip(("start", "stop", "step"), default))
    if isinstance(spec, Mapping):
        try:
            start, stop = conv(spec["start"]), conv(spec["stop"])
        except KeyError as exc:
            raise InvalidArgumentError(f"range needs start and stop, got {dict(spec)!r}") from exc
        step = conv(spec.get("step", 1))
        if step <= 0 or stop < start:
            raise InvalidArgumentError(f"empty or descending range {dict(spec)!r}")
        n = int((stop - start) / step + 1e-9)
        return [conv(start + i * step) for i in range(n + 1)]
    return _as_list(spec, conv)


def fit_rows(rows, mode: str) -> tuple[SingleLatencyModel | BatchLatencyModel, float]:
    """Fit a latency model on calibration rows (single: ``batch_size == 1`` only)."""
    if mode == "single":
        if any(r.batch_size != 1 for r in rows):
            raise InvalidArgumentError("single-request fit needs batch_size == 1 on every row")
        return fit_single((r.output_tokens, r.latency_s) for r in rows)
    if mode == "batch":
        return fit_batch((r.batch_size, r.output_tokens, r.latency_s) for r in rows)
    raise InvalidArgumentError(f"unknown fit mode {mode!r}")


def _latency(sec: Mapping[str, Any], base: Path):
    if "model" in sec:
        data = json.loads((base / sec["model"]).read_text())
        return model_from_dict(data.get("model", data))
    if "calibration" in sec:
        rows = read_calibration_csv(base / sec["calibration"])
        return fit_rows(rows, sec.get("type", "single"))[0]
    return model_from_dict(dict(sec))


def _int(x) -> int:
    if float(x) != int(x):
        raise ValueError(f"{x!r} is not an integer")
    return int(x)


def parse_config(raw: Mapping[str, Any], base_dir: str | Path = ".", env: Mapping[str, str] | None = None) -> RunConfig:
    if not isinstance(raw, Mapping):
        raise InvalidArgumentError("config must be a mapping")
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise InvalidArgumentError(f"unknown config sections: {', '.join(sorted(unknown))}")
    base = Path(base_dir)
    env = os.environ if env is None else env

    work = raw.get("workload") or {}
    if "arrival_rate" not in work or "tokens" not in work:
        raise InvalidArgumentError("workload needs arrival_rate and tokens")
    lams = _as_list(work["arrival_rate"], float)
    if any(not x > 0 for x in lams):
        raise InvalidArgumentError("arrival rates must be > 0")
    dist = from_spec(work["tokens"], base)

    if "latency" not in raw:
        raise InvalidArgumentError("missing latency section")
    latency = _latency(raw["latency"], base)

    pol = raw.get("policy") or {}
    kind = pol.get("kind", "single")
    if kind not in POLICY_KINDS:
        raise InvalidArgumentError(f"policy.kind must be one of {POLICY_KINDS}, got {kind!r}")
    n_max = _as_list(pol["n_max"], float) if pol.get("n_max") is not None else [None]
    b = _as_list(pol["b"], _int) if pol.get("b") is not None else []
    if kind == "fixed" and not b:
        raise InvalidArgumentError("fixed batching needs policy.b")
    patience = pol.get("patience")

    obj = dict(raw.get("objective") or {})
    if "grid" in obj or obj.get("variant") in ("V1", "V2"):
        obj["grid"] = _range(obj.get("grid"), (100, 3000, 100))
    obj["b_range"] = _range(obj.get("b_range"), (1, 128, 1), _int)

    sim = raw.get("sim") or {}
    try:
        seed = int(env[SEED_ENV]) if env.get(SEED_ENV) else int(sim.get("seed", 0))
        cfg = RunConfig(
            lams=lams,
            distribution=dist,
            latency=latency,
            policy_kind=kind,
            n_max=n_max,
            patience=None if patience is None else float(patience),
            b=b,
            b_max=None if pol.get("b_max") is None else _int(pol["b_max"]),
            service_mode=pol.get("service_mode", "deterministic_mean"),
            objective=obj,
            seed=seed,
            replications=int(sim.get("replications", 5)),
            horizon=int(sim.get("horizon", 100_000)),
            warmup=int(sim.get("warmup", 1_000)),
            workers=int(sim.get("workers", 1)),
        )
    except (TypeError, ValueError) as exc:
        raise InvalidArgumentError(f"bad sim/policy value: {exc}") from exc
    if cfg.seed < 0:
        raise InvalidArgumentError("seed must be >= 0")
    return cfg


def load_config(path: str | Path, env: Mapping[str, str] | None = None) -> RunConfig:
    """Read a YAML or JSON config file (JSON is valid YAML)."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise InvalidArgumentError(f"{path}: {exc}") from exc
    return parse_config(raw or {}, path.parent, env)
