"""``tokenq`` command-line interface.

Subcommands::

    tokenq fit      --input calib.csv --mode single|batch --out-dir DIR
    tokenq analyze  --config run.yaml --out-dir DIR
    tokenq simulate --config run.yaml [--seed N] [--reps N] --out-dir DIR
    tokenq optimize --config run.yaml [--objective v1|v2|batch] [--simulate] --out-dir DIR
    tokenq compare  --config run.yaml [--simulate] --out-dir DIR

Every command writes its outputs plus ``manifest.json`` into ``--out-dir``
only after all computation has finished.  Exit codes: 0 success, 2 input
error, 3 infeasible model, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__, analytic
from .config import RunConfig, config_hash, fit_rows, load_config
from .errors import (
    ApproximationDomainError,
    EnvelopeViolationError,
    InstabilityError,
    InvalidArgumentError,
    NoFeasiblePointError,
    NumericalFailureError,
)
from .latency import (
    BatchLatencyModel,
    LinearEnvelope,
    SingleLatencyModel,
    linearize,
    mean_batch_time,
    read_calibration_csv,
)
from .optimize import (
    SimSettings,
    TokenLimitObjective,
    optimal_fixed_batch,
    optimize_token_limit,
    recommend_policy,
)
from .sim import (
    TRACE_HEADER,
    DynamicBatch,
    ElasticBatch,
    FixedBatch,
    SimConfig,
    SingleFCFS,
    replicate_with_trace,
)

log = logging.getLogger("tokenq")

EXIT_OK, EXIT_INPUT, EXIT_INFEASIBLE, EXIT_NUMERICAL = 0, 2, 3, 4

ANALYZE_HEADER = ("lam", "policy", "n_max", "b", "rho", "scv", "mean_service", "mean_wait",
                  "loss_fraction", "mean_wait_served", "phi0", "phi1", "status")
THROUGHPUT_HEADER = ("b", "mean_max_tokens", "batch_time", "throughput")
SIM_SWEEP_HEADER = ("point", "lam", "n_max", "b", "mean_wait", "mean_wait_ci", "mean_wait_served",
                    "loss_fraction", "mean_sojourn", "mean_formation_wait", "throughput", "utilization")
TOKEN_SWEEP_HEADER = ("lam", "n_max", "utility", "rho", "scv", "mean_wait", "loss_fraction",
                      "mean_wait_served", "objective", "status")
BATCH_SWEEP_HEADER = ("lam", "b", "batch_time", "throughput", "rho", "mean_delay", "status")
COMPARE_HEADER = ("lam", "policy", "b", "analytic", "simulated", "simulated_ci", "recommended")
FIT_HEADER = ("row", "observed_s", "fitted_s", "residual_s")


class Infeasible(Exception):
    """Every requested point is infeasible."""


# -- output plumbing ---------------------------------------------------------------------------


def _plain(v: Any) -> Any:
    if isinstance(v, dict):
        return {str(k): _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        f = float(v)
        return f if math.isfinite(f) else None
    return v


def _json_text(obj: Any) -> str:
    return json.dumps(_plain(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def _cell(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        f = float(v)
        return repr(f) if math.isfinite(f) else ""
    return str(v)


def _csv_text(header: Sequence[str], rows: Sequence[dict[str, Any]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_cell(r.get(k)) for k in header])
    return buf.getvalue()


def _emit(out_dir: Path, command: str, config: dict[str, Any], seed: int | None,
          files: dict[str, str]) -> None:
    """Write all outputs atomically, then the manifest."""
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        tmp = out_dir / f".{name}.tmp"
        tmp.write_text(text)
        os.replace(tmp, out_dir / name)
    manifest = {
        "tool": "tokenq",
        "version": __version__,
        "command": command,
        "config": config,
        "config_hash": config_hash(config),
        "seed": seed,
        "outputs": {n: hashlib.sha256(t.encode()).hexdigest() for n, t in sorted(files.items())},
        "created_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    (out_dir / "manifest.json").write_text(_json_text(manifest))
    for name in sorted(files):
        print(out_dir / name)


def _base_output(cfg_dict: dict[str, Any]) -> dict[str, Any]:
    return {"config_hash": config_hash(cfg_dict), "tool_version": __version__}


# -- helpers -----------------------------------------------------------------------------------


def _single_model(m) -> SingleLatencyModel:
    return m if isinstance(m, SingleLatencyModel) else m.as_single()


def _batch_model(m) -> BatchLatencyModel:
    if not isinstance(m, BatchLatencyModel):
        raise InvalidArgumentError("batching policies need a batch latency model (k1..k4)")
    return m


def _policy(cfg: RunConfig, n_max=None, b=None):
    kind = cfg.policy_kind
    if kind == "single":
        return SingleFCFS(n_max)
    if kind == "dynamic":
        return DynamicBatch(cfg.b_max)
    if kind == "elastic":
        return ElasticBatch(cfg.b_max)
    return FixedBatch(b, cfg.service_mode)


def _points(cfg: RunConfig) -> list[tuple[float, float | None, int | None]]:
    if cfg.policy_kind == "single":
        return [(lam, n, None) for lam in cfg.lams for n in cfg.n_max]
    if cfg.policy_kind == "fixed":
        return [(lam, None, b) for lam in cfg.lams for b in cfg.b]
    return [(lam, None, None) for lam in cfg.lams]


# -- fit ---------------------------------------------------------------------------------------


def cmd_fit(args: argparse.Namespace) -> int:
    path = Path(args.input)
    rows = read_calibration_csv(path)
    model, max_resid = fit_rows(rows, args.mode)
    diag = []
    for i, r in enumerate(rows):
        if isinstance(model, SingleLatencyModel):
            fitted = model.a * r.output_tokens + model.c
        else:
            b, l = r.batch_size, r.output_tokens
            fitted = model.k1 * b + model.k2 + model.k3 * b * l + model.k4 * l
        diag.append({"row": i, "observed_s": r.latency_s, "fitted_s": fitted,
                     "residual_s": r.latency_s - fitted})
    cfg = {"input_sha256": hashlib.sha256(path.read_bytes()).hexdigest(), "mode": args.mode}
    out = {**_base_output(cfg), "model": model.to_dict(), "max_abs_residual": max_resid,
           "n_rows": len(rows)}
    _emit(Path(args.out_dir), "fit", cfg, None, {
        "model.json": _json_text(out),
        "residuals.csv": _csv_text(FIT_HEADER, diag),
    })
    return EXIT_OK


# -- analyze -----------------------------------------------------------------------------------


def _analyze_single(cfg: RunConfig, lam: float, n_max) -> dict[str, Any]:
    m = _single_model(cfg.latency)
    n = math.inf if n_max is None else n_max
    s1, s2 = analytic.clipped_service_moments(m, cfg.distribution, n)
    row = {"lam": lam, "policy": "single", "n_max": n_max, "rho": lam * s1,
           "scv": (s2 - s1 * s1) / (s1 * s1), "mean_service": s1, "status": "ok"}
    try:
        if cfg.patience is None:
            row["mean_wait"] = analytic.mg1_wait(lam, s1, s2).mean_wait
            row["mean_wait_served"], row["loss_fraction"] = row["mean_wait"], 0.0
        else:
            res = analytic.impatience_blend(lam, s1, s2, cfg.patience)
            row.update(mean_wait=res.mean_wait_all, loss_fraction=res.loss_fraction,
                       mean_wait_served=res.mean_wait_served)
    except InstabilityError as exc:
        row["status"] = f"unstable (rho={exc.rho:.4g})"
    except ApproximationDomainError as exc:
        row["status"] = f"scv {exc.scv:.4g} outside [0, 1]"
    return row


def _envelope(cfg: RunConfig) -> LinearEnvelope:
    m = _batch_model(cfg.latency)
    env = linearize(m, cfg.distribution, b_check=max(cfg.objective["b_range"]))
    if cfg.policy_kind == "elastic":
        env = LinearEnvelope(m.k1 + m.k3 * cfg.distribution.mean(), env.beta, env.b_ref, env.heavy_tail)
    return env


def _analyze_bound(cfg: RunConfig, lam: float, env: LinearEnvelope) -> dict[str, Any]:
    row = {"lam": lam, "policy": cfg.policy_kind, "b": cfg.b_max, "status": "ok"}
    try:
        res = analytic.dynamic_batch_bound(lam, env)
        row.update(phi0=res.phi0, phi1=res.phi1, mean_wait=res.phi, rho=lam * env.alpha)
    except InstabilityError as exc:
        row.update(rho=exc.rho, status=f"unstable (lam alpha={exc.rho:.4g})")
    return row


def _analyze_fixed(cfg: RunConfig, lam: float, b: int) -> dict[str, Any]:
    h = mean_batch_time(_batch_model(cfg.latency), cfg.distribution, b)
    row = {"lam": lam, "policy": "fixed", "b": b, "rho": lam * h / b, "mean_service": h, "status": "ok"}
    try:
        row["mean_wait"] = analytic.fixed_batch_delay(lam, b, h)
    except InstabilityError as exc:
        row["status"] = f"unstable (lam H / b={exc.rho:.4g})"
    return row


def cmd_analyze(args: argparse.Namespace) -> int:
    cfg = _load(args)
    rows: list[dict[str, Any]] = []
    report: dict[str, Any] = {"policy": cfg.policy_kind}
    if cfg.policy_kind == "single":
        rows = [_analyze_single(cfg, lam, n) for lam, n, _ in _points(cfg)]
    elif cfg.policy_kind == "fixed":
        rows = [_analyze_fixed(cfg, lam, b) for lam, _, b in _points(cfg)]
    else:
        env = _envelope(cfg)
        report["envelope"] = {"alpha": env.alpha, "beta": env.beta, "b_ref": env.b_ref,
                              "heavy_tail": env.heavy_tail}
        if cfg.b_max is not None:
            report["note"] = "delay bound is for unbounded batches; b_max is not modeled"
        rows = [_analyze_bound(cfg, lam, env) for lam in cfg.lams]
    files: dict[str, str] = {}
    if cfg.policy_kind != "single":
        m = _batch_model(cfg.latency)
        curve = analytic.throughput_curve(m, cfg.distribution, cfg.objective["b_range"])
        tp = [{"b": b, "mean_max_tokens": cfg.distribution.max_order_stat_mean(b),
               "batch_time": mean_batch_time(m, cfg.distribution, b), "throughput": mu}
              for b, mu in curve.points]
        report["throughput"] = {"argmax": curve.argmax, "monotone": curve.monotone,
                                "interior_max": curve.interior_max}
        files["throughput.csv"] = _csv_text(THROUGHPUT_HEADER, tp)
    ok = [r for r in rows if r["status"] == "ok"]
    resolved = cfg.resolved()
    report.update(_base_output(resolved), rows=rows, feasible=len(ok))
    files["analyze.csv"] = _csv_text(ANALYZE_HEADER, rows)
    files["report.json"] = _json_text(report)
    if not ok:
        raise Infeasible("every analyzed point is infeasible")
    _emit(Path(args.out_dir), "analyze", resolved, None, files)
    return EXIT_OK


# -- simulate ----------------------------------------------------------------------------------


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = _load(args)
    points = _points(cfg)
    files: dict[str, str] = {}
    results = []
    summary = []
    for k, (lam, n_max, b) in enumerate(points):
        sc = SimConfig(lam, cfg.distribution, cfg.latency, _policy(cfg, n_max, b), patience=cfg.patience,
                       warmup=cfg.warmup, horizon=cfg.horizon, seed=cfg.seed,
                       replications=cfg.replications)
        log.info("simulating point %d/%d: lam=%g n_max=%s b=%s", k + 1, len(points), lam, n_max, b)
        stats, records = replicate_with_trace(sc, workers=cfg.workers)
        st = stats.to_dict()
        results.append({"point": k, "sim_config": sc.to_dict(), "stats": st})
        summary.append({"point": k, "lam": lam, "n_max": n_max, "b": b, **st})
        name = "trace.csv" if len(points) == 1 else f"trace_{k:03d}.csv"
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for r in records:
            w.writerow([_cell(r.arrival), _cell(r.service_start), _cell(r.completion),
                        _cell(r.tokens_requested), _cell(r.tokens_served), _cell(r.lost),
                        _cell(r.batch_id), _cell(r.batch_size)])
        files[name] = buf.getvalue()
    resolved = cfg.resolved()
    files["stats.json"] = _json_text({**_base_output(resolved), "seed": cfg.seed, "config": resolved,
                                      "points": results})
    files["sweep.csv"] = _csv_text(SIM_SWEEP_HEADER, summary)
    _emit(Path(args.out_dir), "simulate", resolved, cfg.seed, files)
    return EXIT_OK


# -- optimize ----------------------------------------------------------------------------------


def _sim_settings(cfg: RunConfig, enabled: bool) -> SimSettings | None:
    if not enabled:
        return None
    return SimSettings(cfg.horizon, cfg.warmup, cfg.seed, cfg.replications, cfg.workers)


def cmd_optimize(args: argparse.Namespace) -> int:
    cfg = _load(args)
    variant = cfg.objective.get("variant", "V1")
    variant = "batch" if variant.lower() == "batch" else variant.upper()
    sim = _sim_settings(cfg, args.simulate)
    optima, rows = [], []
    infeasible = 0
    for lam in cfg.lams:
        log.info("optimizing %s at lam=%g", variant, lam)
        try:
            if variant == "batch":
                opt = optimal_fixed_batch(lam, _batch_model(cfg.latency), cfg.distribution,
                                          cfg.objective["b_range"])
            else:
                obj = TokenLimitObjective(
                    variant, float(cfg.objective.get("theta", 0.5)), cfg.objective["grid"],
                    loss_cost=float(cfg.objective.get("loss_cost", 0.0)),
                    tau=cfg.objective.get("tau", cfg.patience),
                    plus_sign=bool(cfg.objective.get("plus_sign", False)),
                )
                opt = optimize_token_limit(obj, lam, _single_model(cfg.latency), cfg.distribution, sim)
        except NoFeasiblePointError as exc:
            infeasible += 1
            optima.append({"lam": lam, "best": None, "value": None, "error": str(exc)})
            continue
        optima.append({"lam": lam, "best": opt.best, "value": opt.value, "sense": opt.sense,
                       "excluded": [{"candidate": c, "reason": r} for c, r in opt.excluded]})
        key = "b" if variant == "batch" else "n_max"
        for r in opt.table:
            rows.append({"lam": lam, **r, "status": "ok"})
        for c, reason in opt.excluded:
            rows.append({"lam": lam, key: c, "status": f"excluded: {reason}"})
    if infeasible == len(cfg.lams):
        raise Infeasible(optima[0]["error"])
    resolved = cfg.resolved()
    resolved["objective"] = {**resolved["objective"], "variant": variant, "simulate": bool(args.simulate)}
    out = {**_base_output(resolved), "variant": variant, "optima": optima}
    header, name = (BATCH_SWEEP_HEADER, "batch_sweep.csv") if variant == "batch" else (
        TOKEN_SWEEP_HEADER, "token_sweep.csv")
    key = "b" if variant == "batch" else "n_max"
    rows.sort(key=lambda r: (r["lam"], r[key]))
    _emit(Path(args.out_dir), "optimize", resolved, cfg.seed if sim else None, {
        "optimum.json": _json_text(out),
        name: _csv_text(header, rows),
    })
    return EXIT_OK


# -- compare -----------------------------------------------------------------------------------


def cmd_compare(args: argparse.Namespace) -> int:
    cfg = _load(args)
    m = _batch_model(cfg.latency)
    sim = _sim_settings(cfg, args.simulate)
    rows, summary = [], []
    for lam in cfg.lams:
        log.info("comparing policies at lam=%g", lam)
        cmp = recommend_policy(lam, m, cfg.distribution, cfg.objective["b_range"], simulate=sim)
        summary.append({"lam": lam, "b_star": cmp.b_star, "throughput_argmax": cmp.throughput_argmax,
                        "heavy_tail": cmp.heavy_tail, "recommended": cmp.recommended})
        for r in cmp.rows:
            rows.append({"lam": lam, **r, "recommended": r["policy"] == cmp.recommended})
    resolved = cfg.resolved()
    resolved["sim"] = {**resolved["sim"], "enabled": bool(args.simulate)}
    _emit(Path(args.out_dir), "compare", resolved, cfg.seed if sim else None, {
        "compare.csv": _csv_text(COMPARE_HEADER, rows),
        "compare.json": _json_text({**_base_output(resolved), "points": summary}),
    })
    return EXIT_OK


# -- entry point -------------------------------------------------------------------------------


def _load(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "reps", None) is not None:
        cfg = replace(cfg, replications=args.reps)
    if getattr(args, "objective", None) is not None:
        cfg = replace(cfg, objective={**cfg.objective, "variant": args.objective})
        if args.objective in ("v1", "v2") and "grid" not in cfg.objective:
            cfg.objective["grid"] = [float(x) for x in range(100, 3001, 100)]
    if cfg.seed < 0 or cfg.replications < 1:
        raise InvalidArgumentError("need --seed >= 0 and --reps >= 1")
    return cfg


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tokenq", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit a latency model to calibration data")
    f.add_argument("--input", required=True, help="calibration CSV")
    f.add_argument("--mode", choices=("single", "batch"), default="single")
    f.add_argument("--out-dir", default=".")
    f.set_defaults(func=cmd_fit)

    for name, func, helptext in (
        ("analyze", cmd_analyze, "closed-form delays, losses and bounds"),
        ("simulate", cmd_simulate, "run the discrete-event simulator"),
        ("optimize", cmd_optimize, "choose the max-token limit or batch size"),
        ("compare", cmd_compare, "compare batching policies"),
    ):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--config", required=True, help="YAML or JSON run configuration")
        s.add_argument("--out-dir", default=".")
        if name in ("simulate", "optimize", "compare"):
            s.add_argument("--seed", type=int, help="overrides sim.seed and TOKENQ_SEED")
            s.add_argument("--reps", type=int, help="overrides sim.replications")
        if name == "optimize":
            s.add_argument("--objective", choices=("v1", "v2", "batch"))
        if name in ("optimize", "compare"):
            s.add_argument("--simulate", action="store_true",
                           help="use simulated delays instead of closed forms")
        s.set_defaults(func=func)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (Infeasible, NoFeasiblePointError, InstabilityError, ApproximationDomainError,
            EnvelopeViolationError) as exc:
        print(f"tokenq: infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (NumericalFailureError, ArithmeticError) as exc:
        print(f"tokenq: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (InvalidArgumentError, ValueError, KeyError, TypeError, OSError) as exc:
        print(f"tokenq: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
