import csv
import hashlib
import json
import re
from pathlib import Path

import pytest

from tokenq import analytic, cli
from tokenq.config import load_config, parse_config
from tokenq.errors import InvalidArgumentError, NumericalFailureError
from tokenq.sim import TRACE_HEADER

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"


def run(*argv):
    return cli.main([str(a) for a in argv])


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def write(path, text):
    path.write_text(text)
    return path


# -- fit ---------------------------------------------------------------------------------------


def test_fit_calibration_table(tmp_path):
    assert run("fit", "--input", CONFIGS / "calibration_single.csv", "--out-dir", tmp_path) == 0
    out = json.loads((tmp_path / "model.json").read_text())
    assert out["model"]["type"] == "single"
    assert out["model"]["a"] == pytest.approx(0.0230, abs=5e-5)
    assert out["model"]["c"] == pytest.approx(0.19, abs=0.01)
    rows = read_csv(tmp_path / "residuals.csv")
    assert len(rows) == 4
    assert max(abs(float(r["residual_s"])) for r in rows) == pytest.approx(out["max_abs_residual"])


def test_fit_exact_line_and_degenerate(tmp_path):
    head = "input_tokens,output_tokens,batch_size,latency_s\n"
    ok = write(tmp_path / "ok.csv", head + "1,0,1,1\n1,1,1,2\n")
    assert run("fit", "--input", ok, "--out-dir", tmp_path / "a") == 0
    assert json.loads((tmp_path / "a" / "model.json").read_text())["max_abs_residual"] < 1e-12
    bad = write(tmp_path / "bad.csv", head + "1,5,1,1\n1,5,1,2\n")
    assert run("fit", "--input", bad, "--out-dir", tmp_path / "b") == 2
    assert not (tmp_path / "b").exists()


def test_fit_batch_mode(tmp_path):
    lines = ["input_tokens,output_tokens,batch_size,latency_s"]
    for b in (1, 2, 4, 8):
        for l in (100, 400, 900):
            lines.append(f"16,{l},{b},{0.01 * b + 0.15 + 0.002 * b * l + 0.02 * l}")
    p = write(tmp_path / "batch.csv", "\n".join(lines) + "\n")
    assert run("fit", "--input", p, "--mode", "batch", "--out-dir", tmp_path) == 0
    model = json.loads((tmp_path / "model.json").read_text())["model"]
    assert [model[k] for k in ("k1", "k2", "k3", "k4")] == pytest.approx([0.01, 0.15, 0.002, 0.02])
    assert run("fit", "--input", p, "--mode", "single", "--out-dir", tmp_path / "x") == 2


def test_fitted_model_feeds_config(tmp_path):
    run("fit", "--input", CONFIGS / "calibration_single.csv", "--out-dir", tmp_path)
    cfg = write(tmp_path / "run.yaml", "workload: {arrival_rate: 0.025, tokens: {kind: lognormal, log_mean: 7, log_sd: 0.7}}\n"
                "latency: {model: model.json}\npolicy: {n_max: 1600}\n")
    assert load_config(cfg).latency == load_config(CONFIGS / "chat_v1.yaml").latency


# -- analyze -----------------------------------------------------------------------------------


def test_analyze_md1(tmp_path):
    assert run("analyze", "--config", CONFIGS / "md1.json", "--out-dir", tmp_path) == 0
    (row,) = read_csv(tmp_path / "analyze.csv")
    assert float(row["mean_wait"]) == pytest.approx(0.5, rel=1e-12)


def test_analyze_chat_sweep_monotone(tmp_path):
    cfg = write(tmp_path / "c.yaml", (CONFIGS / "chat_v1.yaml").read_text().replace(
        "calibration_single.csv", str(CONFIGS / "calibration_single.csv")).replace(
        "n_max: [500, 1000, 1300, 1600, 2000, 2500, 3000]", "n_max: [500, 1000, 1500, 2000, 2500, 3000]"))
    assert run("analyze", "--config", cfg, "--out-dir", tmp_path / "o") == 0
    waits = [float(r["mean_wait"]) for r in read_csv(tmp_path / "o" / "analyze.csv")]
    assert len(waits) == 6 and all(y > x for x, y in zip(waits, waits[1:]))


def test_analyze_heavy_tail_throughput_flag(tmp_path):
    cfg = write(tmp_path / "h.yaml", "workload: {arrival_rate: 0.3, tokens: {kind: lognormal, log_mean: 7, log_sd: 0.7}}\n"
                "latency: {type: batch, k1: 0.02, k2: 0.2, k3: 0.0003, k4: 0.0025}\npolicy: {kind: dynamic}\n")
    assert run("analyze", "--config", cfg, "--out-dir", tmp_path / "o") == 0
    report = json.loads((tmp_path / "o" / "report.json").read_text())
    assert report["throughput"]["interior_max"] is True
    assert report["envelope"]["heavy_tail"] is True
    tp = read_csv(tmp_path / "o" / "throughput.csv")
    assert len(tp) == 128


def test_analyze_impatience_and_fixed(tmp_path):
    assert run("analyze", "--config", CONFIGS / "chat_v2.yaml", "--out-dir", tmp_path / "v2") == 0
    rows = read_csv(tmp_path / "v2" / "analyze.csv")
    assert all(0 < float(r["loss_fraction"]) < 1 for r in rows)
    assert run("analyze", "--config", CONFIGS / "batch_heavy.yaml", "--out-dir", tmp_path / "f") == 0
    rows = read_csv(tmp_path / "f" / "analyze.csv")
    assert {r["status"].split(" ")[0] for r in rows} == {"ok", "unstable"}


def test_analyze_all_infeasible_exit_3(tmp_path):
    cfg = write(tmp_path / "u.yaml", "workload: {arrival_rate: 2, tokens: {kind: deterministic, value: 1}}\n"
                "latency: {a: 1, c: 0}\n")
    assert run("analyze", "--config", cfg, "--out-dir", tmp_path / "o") == 3
    assert not (tmp_path / "o").exists()


def test_numerical_failure_exit_4(tmp_path, monkeypatch):
    def boom(*_a, **_k):
        raise NumericalFailureError("did not converge")

    monkeypatch.setattr(analytic, "mg1_wait", boom)
    assert run("analyze", "--config", CONFIGS / "md1.json", "--out-dir", tmp_path) == 4


@pytest.mark.parametrize(
    "text",
    [
        "workload: {arrival_rate: 0.5}\nlatency: {a: 1, c: 0}\n",
        "workload: {arrival_rate: 0.5, tokens: {kind: deterministic, value: 1}}\n",
        "workload: {arrival_rate: 0.5, tokens: {kind: deterministic, value: 1}}\nlatency: {a: 1, c: 0}\nextras: {}\n",
        "workload: {arrival_rate: -1, tokens: {kind: deterministic, value: 1}}\nlatency: {a: 1, c: 0}\n",
        "workload: {arrival_rate: 0.5, tokens: {kind: deterministic, value: 1}}\nlatency: {a: 1, c: 0}\npolicy: {kind: round_robin}\n",
        "workload: {arrival_rate: 0.5, tokens: {kind: deterministic, value: 1}}\nlatency: {a: 1, c: 0}\npolicy: {kind: fixed}\n",
        "workload: [unclosed\n",
    ],
)
def test_bad_config_exit_2(tmp_path, text):
    cfg = write(tmp_path / "bad.yaml", text)
    assert run("analyze", "--config", cfg, "--out-dir", tmp_path / "o") == 2


def test_batch_policy_with_single_model_exit_2(tmp_path):
    cfg = write(tmp_path / "b.yaml", "workload: {arrival_rate: 0.5, tokens: {kind: uniform, high: 10}}\n"
                "latency: {a: 1, c: 0}\npolicy: {kind: dynamic}\n")
    assert run("analyze", "--config", cfg, "--out-dir", tmp_path / "o") == 2


# -- simulate ----------------------------------------------------------------------------------


def test_simulate_is_byte_identical(tmp_path):
    for d in ("a", "b"):
        assert run("simulate", "--config", CONFIGS / "chat_v2.yaml", "--reps", 2, "--out-dir", tmp_path / d) == 0
    for name in ("stats.json", "sweep.csv", "trace_000.csv", "trace_002.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
    mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
    ma.pop("created_utc"), mb.pop("created_utc")
    assert ma == mb


def test_simulate_mm1_covers_one(tmp_path):
    assert run("simulate", "--config", CONFIGS / "mm1.yaml", "--out-dir", tmp_path) == 0
    st = json.loads((tmp_path / "stats.json").read_text())["points"][0]["stats"]
    assert abs(st["mean_wait"] - 1.0) <= st["mean_wait_ci"]
    with open(tmp_path / "trace.csv") as fh:
        assert tuple(next(csv.reader(fh))) == TRACE_HEADER


def test_simulate_elastic_not_worse_than_dynamic(tmp_path):
    base = (CONFIGS / "batch_uniform.yaml").read_text()
    for kind in ("dynamic", "elastic"):
        cfg = write(tmp_path / f"{kind}.yaml", base.replace("kind: dynamic", f"kind: {kind}"))
        assert run("simulate", "--config", cfg, "--reps", 2, "--out-dir", tmp_path / kind) == 0
    dyn = read_csv(tmp_path / "dynamic" / "sweep.csv")
    ela = read_csv(tmp_path / "elastic" / "sweep.csv")
    for d, e in zip(dyn, ela):
        assert float(e["mean_wait"]) <= float(d["mean_wait"])


def test_seed_precedence(tmp_path, monkeypatch):
    monkeypatch.setenv("TOKENQ_SEED", "123")
    run("simulate", "--config", CONFIGS / "md1.json", "--reps", 2, "--out-dir", tmp_path / "env")
    assert json.loads((tmp_path / "env" / "stats.json").read_text())["seed"] == 123
    run("simulate", "--config", CONFIGS / "md1.json", "--reps", 2, "--seed", 9, "--out-dir", tmp_path / "flag")
    assert json.loads((tmp_path / "flag" / "stats.json").read_text())["seed"] == 9
    assert run("simulate", "--config", CONFIGS / "md1.json", "--seed", -1, "--out-dir", tmp_path / "neg") == 2


def test_manifest_references_outputs(tmp_path):
    run("simulate", "--config", CONFIGS / "md1.json", "--reps", 2, "--out-dir", tmp_path)
    man = json.loads((tmp_path / "manifest.json").read_text())
    stats = json.loads((tmp_path / "stats.json").read_text())
    assert stats["config_hash"] == man["config_hash"]
    assert man["config"]["sim"]["replications"] == 2
    for name, digest in man["outputs"].items():
        assert hashlib.sha256((tmp_path / name).read_bytes()).hexdigest() == digest
    assert "created" not in json.dumps(stats)


# -- optimize / compare ------------------------------------------------------------------------


def test_optimize_v1_v2_batch(tmp_path):
    assert run("optimize", "--config", CONFIGS / "chat_v1.yaml", "--out-dir", tmp_path / "v1") == 0
    (opt,) = json.loads((tmp_path / "v1" / "optimum.json").read_text())["optima"]
    assert 100 < opt["best"] < 3000
    rows = read_csv(tmp_path / "v1" / "token_sweep.csv")
    assert len(rows) == 30
    assert max(rows, key=lambda r: float(r["objective"]))["n_max"] == str(opt["best"])

    assert run("optimize", "--config", CONFIGS / "chat_v2.yaml", "--out-dir", tmp_path / "v2") == 0
    assert json.loads((tmp_path / "v2" / "optimum.json").read_text())["variant"] == "V2"

    assert run("optimize", "--config", CONFIGS / "batch_heavy.yaml", "--out-dir", tmp_path / "b") == 0
    optima = json.loads((tmp_path / "b" / "optimum.json").read_text())["optima"]
    assert [o["best"] for o in optima] == [1, 8]
    assert (tmp_path / "b" / "batch_sweep.csv").exists()


def test_optimize_objective_flag_overrides(tmp_path):
    assert run("optimize", "--config", CONFIGS / "chat_v2.yaml", "--objective", "v1", "--out-dir", tmp_path) == 0
    assert json.loads((tmp_path / "optimum.json").read_text())["variant"] == "V1"


def test_optimize_infeasible_exit_3(tmp_path):
    cfg = write(tmp_path / "u.yaml", "workload: {arrival_rate: 2, tokens: {kind: deterministic, value: 1}}\n"
                "latency: {a: 1, c: 0}\nobjective: {variant: V1, theta: 0.5}\n")
    assert run("optimize", "--config", cfg, "--out-dir", tmp_path / "o") == 3


def test_compare(tmp_path):
    assert run("compare", "--config", CONFIGS / "batch_uniform.yaml", "--simulate", "--reps", 2,
               "--out-dir", tmp_path) == 0
    rows = read_csv(tmp_path / "compare.csv")
    by = {}
    for r in rows:
        by.setdefault(r["lam"], {})[r["policy"]] = r
    assert len(by) == 5
    for lam, pols in by.items():
        assert pols["dynamic"]["recommended"] == "1"
        assert float(pols["elastic"]["simulated"]) <= float(pols["dynamic"]["simulated"])
        assert float(pols["elastic"]["simulated"]) <= float(pols["dynamic_bmax"]["simulated"])


# -- schemas -----------------------------------------------------------------------------------


def test_documented_headers_match_code():
    doc = (ROOT / "docs" / "schemas.md").read_text()
    blocks = set(re.findall(r"```\n([^\n`]+)\n```", doc))
    for header in (cli.ANALYZE_HEADER, cli.THROUGHPUT_HEADER, cli.SIM_SWEEP_HEADER, cli.TOKEN_SWEEP_HEADER,
                   cli.BATCH_SWEEP_HEADER, cli.COMPARE_HEADER, cli.FIT_HEADER, TRACE_HEADER):
        assert ",".join(header) in blocks


# -- config ------------------------------------------------------------------------------------


def test_parse_config_defaults_and_sweeps():
    raw = {
        "workload": {"arrival_rate": [0.1, 0.2], "tokens": {"kind": "uniform", "high": 100}},
        "latency": {"type": "batch", "k1": 0.01, "k2": 0.1, "k3": 0.001, "k4": 0.01},
        "policy": {"kind": "fixed", "b": [2, 4]},
        "objective": {"b_range": {"start": 1, "stop": 16}},
        "sim": {"seed": 4},
    }
    cfg = parse_config(raw, env={})
    assert cfg.lams == [0.1, 0.2] and cfg.b == [2, 4]
    assert cfg.objective["b_range"] == list(range(1, 17))
    assert cfg.resolved()["objective"]["b_range"] == {"start": 1, "stop": 16, "step": 1}
    assert cfg.seed == 4
    assert parse_config(raw, env={"TOKENQ_SEED": "77"}).seed == 77


def test_parse_config_rejects_non_integer_batch():
    raw = {
        "workload": {"arrival_rate": 0.1, "tokens": {"kind": "uniform", "high": 100}},
        "latency": {"a": 1, "c": 0},
        "policy": {"kind": "fixed", "b": 2.5},
    }
    with pytest.raises(InvalidArgumentError):
        parse_config(raw, env={})


def test_help_lists_subcommands(capsys):
    with pytest.raises(SystemExit) as ei:
        cli.main(["--help"])
    assert ei.value.code == 0
    out = capsys.readouterr().out
    for name in ("fit", "analyze", "simulate", "optimize", "compare"):
        assert name in out
