"""Config schema strictness, file outputs, aggregation math, and CLI exit
codes."""

import csv
import json
import math
import os

import numpy as np
import pytest

import stormdist.harness as harness
from stormdist import (
    ContractViolation,
    DivergenceError,
    UnknownConfigKey,
    ValidationFailure,
)
from stormdist.cli import main
from stormdist.harness import (
    CSV_COLUMNS,
    Cell,
    RunConfig,
    cell_aggregates,
    execute_cell,
    expand_cells,
    fit_slope,
    parse_config,
    resolve_problem,
    resolve_schedule,
    run_cells,
    speedup_table,
    summarize,
)
from stormdist.runtime import THREADS_ENV_VAR


def _problem(**extra):
    return {"family": "het_quadratic", "d": 4, "k": 2, "sigma": 1.0, "seed": 3, **extra}


def _config(**extra):
    return {"problem": _problem(), "algo": "dstorm", "T": 20, **extra}


def _write_config(tmp_path, obj, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(obj))
    return str(path)


def test_parse_minimal_config_defaults():
    cfg = parse_config(_config())
    assert cfg.algos == ("dstorm",)
    assert cfg.T_list == (20,)
    assert cfg.seeds == (0,)
    assert cfg.k_list is None and cfg.threads == 1


def test_parse_rejects_unknown_keys():
    with pytest.raises(UnknownConfigKey, match="moementum"):
        parse_config(_config(moementum=0.9))
    with pytest.raises(UnknownConfigKey, match="schedule"):
        parse_config(_config(schedule={"bb": 1.0}))


def test_parse_rejects_missing_required_keys():
    broken = _config()
    del broken["T"]
    with pytest.raises(UnknownConfigKey, match="missing"):
        parse_config(broken)


def test_parse_value_validations():
    with pytest.raises(ValidationFailure):
        parse_config(_config(algo="newton"))
    with pytest.raises(ValidationFailure):
        parse_config(_config(T=0))
    with pytest.raises(ValidationFailure):
        parse_config(_config(T=[100, True]))
    with pytest.raises(ValidationFailure):
        parse_config(_config(threads=0))
    with pytest.raises(ValidationFailure):
        parse_config(_config(x1=[1.0, "a"]))
    with pytest.raises(ValidationFailure):
        parse_config(_config(seeds=0))


def test_parse_seed_count_expands_to_range():
    assert parse_config(_config(seeds=3)).seeds == (0, 1, 2)
    assert parse_config(_config(seeds=[5, 9])).seeds == (5, 9)


def test_parse_k_list_with_explicit_centers_rejected():
    problem = {
        "family": "het_quadratic",
        "d": 2,
        "k": 2,
        "sigma": 1.0,
        "centers": [[0.0, 0.0], [1.0, 1.0]],
    }
    with pytest.raises(ValidationFailure, match="centers"):
        parse_config({"problem": problem, "algo": "dstorm", "T": 5, "k_list": [2, 4]})


def test_expand_cells_grid_and_run_ids():
    cfg = parse_config(
        _config(algo=["adstorm", "dsgd"], T=[10, 20], k_list=[1, 2], seeds=2)
    )
    cells = expand_cells(cfg)
    assert len(cells) == 2 * 2 * 2 * 2
    assert cells[0].run_id == "adstorm_K1_T10_s0"
    assert len({c.run_id for c in cells}) == len(cells)


def test_resolve_schedule_noise_scale_defaults():
    cfg = parse_config(_config())
    spec = resolve_problem(cfg, 2)
    assert resolve_schedule(spec, "adstorm", {}).noise_scale == spec.G
    assert resolve_schedule(spec, "dstorm", {}).noise_scale == math.sqrt(spec.sigma_sq)
    assert resolve_schedule(spec, "dstorm", {"noise_scale": 2.5}).noise_scale == 2.5
    with pytest.raises(ValidationFailure, match=r"b\^3"):
        resolve_schedule(spec, "dstorm", {"b": 0.1})


def test_execute_cell_writes_parseable_csv(tmp_path):
    cfg = parse_config(_config(epsilon=0.05))
    cell = Cell("dstorm", 2, 20, 0)
    agg = execute_cell(cfg, cell, str(tmp_path))
    with open(tmp_path / "dstorm_K2_T20_s0.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert len(rows) == 21
    grad_norms = np.array([float(r[7]) for r in rows[1:]])
    assert agg["avg_grad_norm"] == float(grad_norms.mean())
    assert agg["min_grad_norm"] == float(grad_norms.min())
    assert agg["sum_grad_sq"] == float((grad_norms**2).sum())
    assert rows[1][14] in ("True", "False")
    # every t and ifo column entry is exact
    assert [int(r[4]) for r in rows[1:]] == list(range(1, 21))
    assert [int(r[11]) for r in rows[1:]] == [1 + 2 * t for t in range(1, 21)]


def test_ifo_to_epsilon_picks_first_crossing(tmp_path):
    cfg = parse_config(_config(epsilon=0.05))
    agg = execute_cell(cfg, Cell("dstorm", 2, 20, 0), None)
    with_eps = agg["ifo_to_epsilon"]
    spec = resolve_problem(cfg, 2)
    params = resolve_schedule(spec, "dstorm", {})
    from stormdist import run_dstorm

    res = run_dstorm(spec, params, 20, 0, run_id="x")
    hits = [r.ifo_per_worker for r in res.metrics if r.grad_norm <= 0.05]
    assert with_eps == (hits[0] if hits else None)


def test_metadata_contents(tmp_path):
    cfg = parse_config(_config(schedule={"noise_scale": 1.0}))
    execute_cell(cfg, Cell("adstorm", 2, 10, 1), str(tmp_path))
    meta = json.loads((tmp_path / "adstorm_K2_T10_s1.json").read_text())
    assert meta["run_id"] == "adstorm_K2_T10_s1"
    assert meta["K"] == 2 and meta["T"] == 10 and meta["master_seed"] == 1
    assert meta["schedule"]["noise_scale"] == 1.0
    assert meta["schedule"]["eta0"] > 0
    assert 1 <= meta["x_out_round"] <= 10
    assert len(meta["x_out"]) == 4
    assert meta["ifo_per_worker"] == 21
    assert meta["problem_resolved"]["L"] == 1.0


def test_rewrites_are_byte_identical(tmp_path):
    cfg = parse_config(_config())
    cell = Cell("dstorm", 2, 15, 3)
    execute_cell(cfg, cell, str(tmp_path))
    csv_first = (tmp_path / f"{cell.run_id}.csv").read_bytes()
    json_first = (tmp_path / f"{cell.run_id}.json").read_bytes()
    execute_cell(cfg, cell, str(tmp_path))
    assert (tmp_path / f"{cell.run_id}.csv").read_bytes() == csv_first
    assert (tmp_path / f"{cell.run_id}.json").read_bytes() == json_first


def test_thread_setting_leaves_outputs_unchanged(tmp_path):
    base = _config(algo=["adstorm"], T=30)
    serial = parse_config(base)
    threaded = parse_config({**base, "threads": 2})
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    execute_cell(serial, Cell("adstorm", 2, 30, 0), str(tmp_path / "a"))
    execute_cell(threaded, Cell("adstorm", 2, 30, 0), str(tmp_path / "b"))
    for name in ("adstorm_K2_T30_s0.csv", "adstorm_K2_T30_s0.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_run_cells_pool_size_does_not_change_files(tmp_path):
    cfg = parse_config(_config(algo=["dstorm", "dsgd"], T=[10, 20], seeds=2))
    run_cells(cfg, str(tmp_path / "par"), parallel=True)
    run_cells(cfg, str(tmp_path / "ser"), parallel=False)
    names = sorted(os.listdir(tmp_path / "par"))
    assert names == sorted(os.listdir(tmp_path / "ser"))
    assert len([n for n in names if n.endswith(".csv")]) == 8
    for name in names:
        assert (tmp_path / "par" / name).read_bytes() == (tmp_path / "ser" / name).read_bytes()


def test_divergent_cell_still_writes_partial_outputs(tmp_path, monkeypatch):
    cfg = parse_config(_config(algo="dsgd", T=5))
    cell = Cell("dsgd", 2, 5, 0)
    real = execute_cell(cfg, Cell("dsgd", 2, 5, 0), None)  # sanity: normally fine

    def explode(*args, **kwargs):
        from stormdist import run_dstorm

        spec = resolve_problem(cfg, 2)
        params = resolve_schedule(spec, "dstorm", {})
        records = run_dstorm(spec, params, 3, 0, run_id=cell.run_id).metrics
        raise DivergenceError("round 4: iterate norm exceeded the divergence guard", record=records)

    monkeypatch.setattr(harness, "run_dsgd", explode)
    with pytest.raises(DivergenceError):
        execute_cell(cfg, cell, str(tmp_path))
    assert (tmp_path / "dsgd_K2_T5_s0.csv").exists()
    meta = json.loads((tmp_path / "dsgd_K2_T5_s0.json").read_text())
    assert meta["diverged"] is True
    assert "round 4" in meta["error"]
    assert real["run_id"] == "dsgd_K2_T5_s0"


def test_fit_slope_recovers_exact_power_law():
    ts = np.array([100.0, 300.0, 1000.0, 3000.0, 10000.0])
    slope, intercept = fit_slope(ts, 3.0 * ts**-0.5)
    assert abs(slope - (-0.5)) < 1e-12
    assert abs(intercept - math.log10(3.0)) < 1e-12


def test_fit_slope_input_guards():
    with pytest.raises(ContractViolation):
        fit_slope([100.0], [1.0])
    with pytest.raises(ContractViolation):
        fit_slope([100.0, 200.0], [1.0, -1.0])
    with pytest.raises(ContractViolation):
        fit_slope([100.0, 100.0], [1.0, 2.0])
    with pytest.raises(ContractViolation):
        fit_slope([100.0, 200.0], [1.0, 2.0, 3.0])


def test_speedup_table_reference_column():
    rows = speedup_table({1: 4.0, 8: 2.0, 64: 1.0})
    assert [r["K"] for r in rows] == [1, 8, 64]
    assert rows[0]["ratio_vs_kmax"] == 4.0
    assert abs(rows[0]["reference_kmax"] - 4.0) < 1e-12  # 64^(1/3)
    assert abs(rows[1]["reference_kmax"] - 2.0) < 1e-12
    assert rows[2]["ratio_vs_kmax"] == 1.0
    flat = speedup_table({1: 2.0, 4: 2.0})
    assert all(r["ratio_vs_kmax"] == 1.0 for r in flat)
    with pytest.raises(ContractViolation):
        speedup_table({4: 1.0})
    with pytest.raises(ContractViolation):
        speedup_table({1: 0.0, 4: 1.0})


def _fake_aggregates(ts, seeds=2, algo="dstorm", K=1):
    out = []
    for T in ts:
        mean = 5.0 * T ** (-1.0 / 3.0)
        for s in range(seeds):
            delta = 0.1 * mean * (1 if s % 2 == 0 else -1)
            out.append(
                {
                    "run_id": f"{algo}_K{K}_T{T}_s{s}",
                    "algo": algo,
                    "K": K,
                    "T": T,
                    "seed": s,
                    "avg_grad_norm": mean + delta,
                    "min_grad_norm": 0.5 * mean,
                    "sum_grad_sq": 1.0,
                    "final_f": 0.25,
                    "ifo_to_epsilon": 2 * T + 1 if s == 0 else None,
                }
            )
    return out


def test_summarize_cell_statistics_match_numpy():
    aggs = _fake_aggregates([100, 300, 1000, 10000])
    summary = summarize(aggs, epsilon=0.1)
    cell = summary["cells"][0]
    values = [a["avg_grad_norm"] for a in aggs if a["T"] == 100]
    assert abs(cell["avg_grad_norm_mean"] - np.mean(values)) < 1e-15
    expected_se = np.std(values, ddof=1) / math.sqrt(len(values))
    assert abs(cell["avg_grad_norm_stderr"] - expected_se) < 1e-15
    assert cell["ifo_to_epsilon_hits"] == 1
    assert cell["ifo_to_epsilon_mean"] == 201.0


def test_summarize_slope_eligibility_gating():
    # 4 distinct horizons spanning exactly 2 decades: slope present and exact
    summary = summarize(_fake_aggregates([100, 300, 1000, 10000]), None)
    assert len(summary["slopes"]) == 1
    s = summary["slopes"][0]
    assert abs(s["slope"] - (-1.0 / 3.0)) < 1e-12
    assert s["num_T"] == 4 and abs(s["decades"] - 2.0) < 1e-12
    # too few horizons
    assert summarize(_fake_aggregates([100, 300, 1000]), None)["slopes"] == []
    # enough horizons, too narrow a span
    assert summarize(_fake_aggregates([100, 200, 400, 800]), None)["slopes"] == []


def test_summarize_speedup_needs_two_worker_counts():
    aggs = _fake_aggregates([100], K=1) + _fake_aggregates([100], K=8)
    for a in aggs:
        if a["K"] == 8:
            a["min_grad_norm"] /= 2.0
    summary = summarize(aggs, None)
    assert len(summary["speedup"]) == 1
    rows = summary["speedup"][0]["rows"]
    assert rows[0]["K"] == 1 and abs(rows[0]["ratio_vs_kmax"] - 2.0) < 1e-12
    assert summarize(_fake_aggregates([100]), None)["speedup"] == []


def test_pool_size_env_cap(monkeypatch):
    monkeypatch.setenv(THREADS_ENV_VAR, "1")
    assert harness._pool_size(8) == 1
    monkeypatch.setenv(THREADS_ENV_VAR, "4")
    assert harness._pool_size(8) == 4
    assert harness._pool_size(2) == 2
    monkeypatch.delenv(THREADS_ENV_VAR)
    assert harness._pool_size(1) == 1


def test_cli_run_and_exit_codes(tmp_path, capsys):
    out = tmp_path / "runs"
    path = _write_config(tmp_path, _config())
    assert main(["run", "--config", path, "--out", str(out)]) == 0
    assert (out / "dstorm_K2_T20_s0.csv").exists()
    assert "dstorm_K2_T20_s0" in capsys.readouterr().out

    bad_key = _write_config(tmp_path, _config(moementum=0.9), "bad_key.json")
    assert main(["run", "--config", bad_key, "--out", str(out)]) == 2
    assert "moementum" in capsys.readouterr().err

    bad_b = _write_config(tmp_path, _config(schedule={"b": 0.1}), "bad_b.json")
    assert main(["run", "--config", bad_b, "--out", str(out)]) == 3
    assert "b^3" in capsys.readouterr().err

    no_out = _write_config(tmp_path, _config(), "no_out.json")
    assert main(["run", "--config", no_out]) == 3


def test_cli_run_trace_outputs(tmp_path):
    path = _write_config(tmp_path, _config(T=3))
    out = tmp_path / "traced"
    trace = tmp_path / "wire.trace"
    assert main(["run", "--config", path, "--out", str(out), "--trace", str(trace)]) == 0
    from stormdist import read_trace

    messages = read_trace(trace)
    assert messages, "trace should contain the exchanged messages"
    multi = _write_config(tmp_path, _config(T=3, seeds=2), "multi.json")
    assert main(["run", "--config", multi, "--out", str(out), "--trace", str(trace)]) == 0
    assert (tmp_path / "wire.trace.dstorm_K2_T3_s0").exists()
    assert (tmp_path / "wire.trace.dstorm_K2_T3_s1").exists()


def test_cli_sweep_overrides_and_summary(tmp_path, capsys):
    path = _write_config(tmp_path, _config(algo=["dstorm"], T=[10, 20]))
    out = tmp_path / "sweep"
    assert main(["sweep", "--config", path, "--k", "1,2", "--seeds", "2", "--out", str(out)]) == 0
    summary = json.loads((out / "sweep_summary.json").read_text())
    assert len(summary["cells"]) == 4  # 2 K x 2 T
    assert all(c["seeds"] == 2 for c in summary["cells"])
    assert (out / "sweep_summary.csv").read_text().splitlines()[0].startswith("algo,K,T,seeds")
    assert len(summary["speedup"]) == 2
    assert main(["sweep", "--config", path, "--k", "1,x", "--out", str(out)]) == 3
    capsys.readouterr()


def test_cli_check_grad_and_estimate(tmp_path, capsys):
    problem = _write_config(tmp_path, _problem(), "problem.json")
    assert main(["check-grad", "--problem", problem, "--points", "20"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["pass"] and report["max_rel_err"] < 1e-5
    assert main(["estimate", "--problem", problem, "--samples", "2000"]) == 0
    est = json.loads(capsys.readouterr().out)
    assert est["G_estimate"] <= est["G_declared"]
