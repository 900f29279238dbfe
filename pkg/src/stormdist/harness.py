"""Experiment harness: strict configs, delimited output, sweeps, summaries.

A config is a JSON object that expands into a grid of runs (algorithm x
worker count x horizon x seed). Every run writes one CSV of per-round
metrics and one metadata JSON next to it; identical configs rewrite
byte-identical files. Unknown keys anywhere in the config are rejected
outright (CLI exit 2), constant inequalities that fail cite themselves
(exit 3): silently "helpful" coercion is how misconfigured experiments get
published, so there is none here.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import __version__
from .algorithms import RunResult, run_adstorm, run_dsgd, run_dstorm
from .errors import ContractViolation, DivergenceError, UnknownConfigKey, ValidationFailure
from .problems import FAMILIES, ProblemSpec, problem_from_json, problem_to_json
from .runtime import THREADS_ENV_VAR
from .schedule import ScheduleParams, derive_params, init_state

ALGOS = ("adstorm", "dstorm", "dsgd")

CSV_COLUMNS = (
    "run_id", "algo", "K", "d", "t", "eta", "a", "grad_norm", "f_val", "err_norm",
    "potential", "ifo_per_worker", "bytes_up", "bytes_down", "clamped", "out_of_region",
)

_TOP_KEYS = {"problem", "algo", "T", "k_list", "seeds", "schedule", "epsilon", "x1", "threads", "out_dir"}
_SCHEDULE_KEYS = {"b", "alpha", "kappa_bar", "c", "w0", "noise_scale", "force_a_one", "fresh_feedback_sample"}


@dataclass(frozen=True)
class RunConfig:
    """A validated experiment grid; one instance expands to many cells."""

    problem: dict
    algos: tuple[str, ...]
    T_list: tuple[int, ...]
    k_list: tuple[int, ...] | None
    seeds: tuple[int, ...]
    schedule: dict
    epsilon: float | None
    x1: tuple[float, ...] | None
    threads: int
    out_dir: str | None


@dataclass(frozen=True)
class Cell:
    algo: str
    K: int
    T: int
    seed: int

    @property
    def run_id(self) -> str:
        return f"{self.algo}_K{self.K}_T{self.T}_s{self.seed}"


def _as_list(value, name, kind):
    items = value if isinstance(value, list) else [value]
    if not items:
        raise ValidationFailure(f"{name} must not be empty")
    out = []
    for v in items:
        if kind is int and (isinstance(v, bool) or not isinstance(v, int)):
            raise ValidationFailure(f"{name} entries must be integers, got {v!r}")
        if kind is str and not isinstance(v, str):
            raise ValidationFailure(f"{name} entries must be strings, got {v!r}")
        out.append(v)
    return tuple(out)


def parse_config(obj: dict) -> RunConfig:
    """Validate a raw config object against the documented schema."""
    if not isinstance(obj, dict):
        raise ValidationFailure("config must be a JSON object")
    for key in obj:
        if key not in _TOP_KEYS:
            raise UnknownConfigKey(key)
    for key in ("problem", "algo", "T"):
        if key not in obj:
            raise UnknownConfigKey(key, where="config (missing required key)")

    schedule = obj.get("schedule", {})
    if not isinstance(schedule, dict):
        raise ValidationFailure("'schedule' must be an object")
    for key in schedule:
        if key not in _SCHEDULE_KEYS:
            raise UnknownConfigKey(key, where="schedule")

    algos = _as_list(obj["algo"], "algo", str)
    for a in algos:
        if a not in ALGOS:
            raise ValidationFailure(f"algo must be one of {ALGOS}, got {a!r}")

    T_list = _as_list(obj["T"], "T", int)
    if any(t < 1 for t in T_list):
        raise ValidationFailure("T >= 1 required")

    problem = obj["problem"]
    if not isinstance(problem, dict):
        raise ValidationFailure("'problem' must be an object")

    k_list = None
    if "k_list" in obj:
        k_list = _as_list(obj["k_list"], "k_list", int)
        if any(k < 1 for k in k_list):
            raise ValidationFailure("k_list entries must be >= 1")
        if "centers" in problem and set(k_list) != {problem.get("k")}:
            raise ValidationFailure("k_list cannot resize a problem with explicit centers")

    seeds = obj.get("seeds", [0])
    if isinstance(seeds, int) and not isinstance(seeds, bool):
        if seeds < 1:
            raise ValidationFailure("seeds count must be >= 1")
        seeds = tuple(range(seeds))
    else:
        seeds = _as_list(seeds, "seeds", int)

    epsilon = obj.get("epsilon")
    if epsilon is not None:
        epsilon = float(epsilon)
        if epsilon <= 0:
            raise ValidationFailure("epsilon > 0 required")

    x1 = obj.get("x1")
    if x1 is not None:
        if not isinstance(x1, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in x1):
            raise ValidationFailure("x1 must be a list of numbers")
        x1 = tuple(float(v) for v in x1)

    threads = obj.get("threads", 1)
    if isinstance(threads, bool) or not isinstance(threads, int) or threads < 1:
        raise ValidationFailure("threads must be an integer >= 1")

    out_dir = obj.get("out_dir")
    if out_dir is not None and not isinstance(out_dir, str):
        raise ValidationFailure("out_dir must be a string")

    return RunConfig(
        problem=problem,
        algos=algos,
        T_list=T_list,
        k_list=k_list,
        seeds=seeds,
        schedule=dict(schedule),
        epsilon=epsilon,
        x1=x1,
        threads=threads,
        out_dir=out_dir,
    )


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return parse_config(json.load(fh))


def expand_cells(config: RunConfig) -> list[Cell]:
    k_list = config.k_list
    if k_list is None:
        if "k" not in config.problem:
            raise UnknownConfigKey("k", where="problem (missing required key)")
        k_list = (int(config.problem["k"]),)
    return [
        Cell(algo, K, T, seed)
        for algo in config.algos
        for K in k_list
        for T in config.T_list
        for seed in config.seeds
    ]


def resolve_problem(config: RunConfig, K: int) -> ProblemSpec:
    problem = dict(config.problem)
    problem["k"] = K
    return problem_from_json(problem)


def resolve_schedule(spec: ProblemSpec, algo: str, overrides: dict) -> ScheduleParams:
    """Derive schedule constants for one cell.

    The adaptive variant scales by the declared gradient bound G, the others
    by the declared noise level; an explicit noise_scale override replaces
    either (required for zero-noise problems, where sigma alone would give a
    degenerate step size).
    """
    noise_scale = overrides.get("noise_scale")
    if noise_scale is None:
        noise_scale = spec.G if algo == "adstorm" else math.sqrt(spec.sigma_sq)
    kwargs = {}
    for key in ("b", "alpha", "kappa_bar", "c", "w0"):
        if key in overrides:
            kwargs[key] = float(overrides[key])
    return derive_params(spec.num_workers, spec.L, float(noise_scale), **kwargs)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "True" if value else "False"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_metrics_csv(records, path):
    """Atomic CSV write; float fields use shortest round-trip repr."""
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in records:
            writer.writerow([_fmt(getattr(r, col)) for col in CSV_COLUMNS])
    os.replace(tmp, path)


def _vector(x) -> list[float]:
    return [float(v) for v in x]


def run_metadata(result: RunResult, cell: Cell, config: RunConfig) -> dict:
    params = result.params
    meta = {
        "run_id": result.run_id,
        "algo": result.algo,
        "K": result.problem.num_workers,
        "d": result.problem.dim,
        "T": result.T,
        "master_seed": result.master_seed,
        "problem": dict(config.problem, k=cell.K),
        "problem_resolved": {
            "region_radius": result.problem.region_radius,
            "L": result.problem.L,
            "sigma_sq": result.problem.sigma_sq,
            "G": result.problem.G,
            "f_star": result.problem.f_star,
        },
        "schedule": None,
        "flags": {
            "force_a_one": bool(config.schedule.get("force_a_one", False)),
            "fresh_feedback_sample": bool(config.schedule.get("fresh_feedback_sample", False)),
        },
        "x1": list(config.x1) if config.x1 is not None else None,
        "x_out_round": result.x_out_round,
        "x_out": _vector(result.x_out),
        "ifo_per_worker": result.accounting.ifo_per_worker,
        "bytes_up": result.accounting.bytes_up,
        "bytes_down": result.accounting.bytes_down,
        "rounds": result.accounting.rounds,
        "final_grad_norm": result.metrics[-1].grad_norm if result.metrics else None,
        "version": __version__,
    }
    if params is not None:
        meta["schedule"] = {
            "kappa_bar": params.kappa_bar,
            "c": params.c,
            "b": params.b,
            "alpha": params.alpha,
            "L": params.L,
            "noise_scale": params.noise_scale,
            "K": params.num_workers,
            "w0": params.w0,
            "eta0": init_state(params).eta,
        }
    return meta


def write_json(obj, path):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def execute_cell(config: RunConfig, cell: Cell, out_dir, trace_path=None) -> dict:
    """Run one grid cell and write its CSV + metadata; returns cell aggregates."""
    spec = resolve_problem(config, cell.K)
    overrides = config.schedule
    params = resolve_schedule(spec, cell.algo, overrides)
    common = dict(
        threads=config.threads,
        trace_path=trace_path,
        run_id=cell.run_id,
        x1=config.x1,
    )
    try:
        if cell.algo == "adstorm":
            result = run_adstorm(
                spec, params, cell.T, cell.seed,
                force_a_one=bool(overrides.get("force_a_one", False)),
                fresh_feedback_sample=bool(overrides.get("fresh_feedback_sample", False)),
                **common,
            )
        elif cell.algo == "dstorm":
            result = run_dstorm(
                spec, params, cell.T, cell.seed,
                force_a_one=bool(overrides.get("force_a_one", False)),
                **common,
            )
        else:
            result = run_dsgd(spec, cell.T, cell.seed, params=params, **common)
    except DivergenceError as exc:
        if out_dir is not None and exc.record:
            write_metrics_csv(exc.record, os.path.join(out_dir, f"{cell.run_id}.csv"))
            write_json(
                {"run_id": cell.run_id, "diverged": True, "error": str(exc)},
                os.path.join(out_dir, f"{cell.run_id}.json"),
            )
        raise

    if out_dir is not None:
        write_metrics_csv(result.metrics, os.path.join(out_dir, f"{cell.run_id}.csv"))
        write_json(run_metadata(result, cell, config), os.path.join(out_dir, f"{cell.run_id}.json"))
    return cell_aggregates(result, config.epsilon)


def cell_aggregates(result: RunResult, epsilon: float | None) -> dict:
    """Per-run scalars the sweep summary is built from."""
    grad_norms = np.array([r.grad_norm for r in result.metrics])
    agg = {
        "run_id": result.run_id,
        "algo": result.algo,
        "K": result.problem.num_workers,
        "T": result.T,
        "seed": result.master_seed,
        "avg_grad_norm": float(grad_norms.mean()),
        "min_grad_norm": float(grad_norms.min()),
        "sum_grad_sq": float((grad_norms**2).sum()),
        "final_f": result.metrics[-1].f_val,
        "ifo_to_epsilon": None,
    }
    if epsilon is not None:
        hit = np.nonzero(grad_norms <= epsilon)[0]
        if hit.size:
            agg["ifo_to_epsilon"] = result.metrics[int(hit[0])].ifo_per_worker
    return agg


def _pool_size(n_jobs: int) -> int:
    cap = os.environ.get(THREADS_ENV_VAR)
    limit = int(cap) if cap is not None else (os.cpu_count() or 1)
    return max(1, min(n_jobs, limit))


def run_cells(config: RunConfig, out_dir, trace_path=None, parallel=True) -> list[dict]:
    """Execute every cell; outputs are identical for any pool size."""
    cells = expand_cells(config)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    traces = {}
    if trace_path is not None:
        if len(cells) == 1:
            traces[cells[0]] = trace_path
        else:
            for cell in cells:
                traces[cell] = f"{trace_path}.{cell.run_id}"
    size = _pool_size(len(cells)) if parallel else 1
    if size == 1:
        return [execute_cell(config, cell, out_dir, traces.get(cell)) for cell in cells]
    with ThreadPoolExecutor(max_workers=size) as pool:
        futures = [pool.submit(execute_cell, config, cell, out_dir, traces.get(cell)) for cell in cells]
        return [f.result() for f in futures]


def cli_run(config_path, out_dir=None, trace_path=None) -> list[dict]:
    """Back the `run` subcommand: execute a config file's grid."""
    config = load_config(config_path)
    target = out_dir if out_dir is not None else config.out_dir
    if target is None:
        raise ValidationFailure("no output directory: set 'out_dir' in the config or pass --out")
    return run_cells(config, target, trace_path)


def fit_slope(ts, values) -> tuple[float, float]:
    """Least-squares slope of log10(values) against log10(ts).

    Requires at least two distinct positive abscissae and positive values;
    a degenerate spread has no slope and raises instead of returning noise.
    """
    ts = np.asarray(ts, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if ts.shape != values.shape or ts.ndim != 1 or ts.shape[0] < 2:
        raise ContractViolation("fit_slope needs two same-length 1-D arrays with >= 2 points")
    if not ((ts > 0).all() and (values > 0).all()):
        raise ContractViolation("fit_slope needs positive ts and values")
    if np.unique(ts).size < 2:
        raise ContractViolation("fit_slope needs at least two distinct ts")
    slope, intercept = np.polyfit(np.log10(ts), np.log10(values), 1)
    return float(slope), float(intercept)


# slope eligibility: at least this many distinct horizons spanning >= 2 decades
SLOPE_MIN_POINTS = 4
SLOPE_MIN_DECADES = 2.0 - 1e-9


def speedup_table(metric_by_k: dict[int, float]) -> list[dict]:
    """Ratios against the largest worker count next to the K^(-1/3) reference."""
    if len(metric_by_k) < 2:
        raise ContractViolation("speedup_table needs at least two worker counts")
    k_max = max(metric_by_k)
    if any(v <= 0 for v in metric_by_k.values()):
        raise ContractViolation("speedup_table needs positive metrics")
    return [
        {
            "K": k,
            "metric": metric_by_k[k],
            "ratio_vs_kmax": metric_by_k[k] / metric_by_k[k_max],
            "reference_kmax": (k_max / k) ** (1.0 / 3.0),
        }
        for k in sorted(metric_by_k)
    ]


def _mean_stderr(values) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 1:
        return float(arr[0]), 0.0
    return float(arr.mean()), float(arr.std(ddof=1) / math.sqrt(arr.size))


def summarize(aggregates: list[dict], epsilon: float | None) -> dict:
    """Collapse per-run aggregates into the sweep summary structure."""
    by_cell: dict[tuple, list[dict]] = {}
    for agg in aggregates:
        by_cell.setdefault((agg["algo"], agg["K"], agg["T"]), []).append(agg)

    cells = []
    for (algo, K, T) in sorted(by_cell):
        runs = by_cell[(algo, K, T)]
        avg_mean, avg_se = _mean_stderr([r["avg_grad_norm"] for r in runs])
        min_mean, min_se = _mean_stderr([r["min_grad_norm"] for r in runs])
        hits = [r["ifo_to_epsilon"] for r in runs if r["ifo_to_epsilon"] is not None]
        cells.append(
            {
                "algo": algo,
                "K": K,
                "T": T,
                "seeds": len(runs),
                "avg_grad_norm_mean": avg_mean,
                "avg_grad_norm_stderr": avg_se,
                "min_grad_norm_mean": min_mean,
                "min_grad_norm_stderr": min_se,
                "sum_grad_sq_mean": _mean_stderr([r["sum_grad_sq"] for r in runs])[0],
                "final_f_mean": _mean_stderr([r["final_f"] for r in runs])[0],
                "epsilon": epsilon,
                "ifo_to_epsilon_mean": _mean_stderr(hits)[0] if hits else None,
                "ifo_to_epsilon_hits": len(hits),
            }
        )

    slopes = []
    by_algo_k: dict[tuple, list[dict]] = {}
    for cell in cells:
        by_algo_k.setdefault((cell["algo"], cell["K"]), []).append(cell)
    for (algo, K), group in sorted(by_algo_k.items()):
        ts = sorted({c["T"] for c in group})
        if len(ts) < SLOPE_MIN_POINTS:
            continue
        decades = math.log10(max(ts) / min(ts))
        if decades < SLOPE_MIN_DECADES:
            continue
        metric = [
            float(np.mean([c["avg_grad_norm_mean"] for c in group if c["T"] == t])) for t in ts
        ]
        slope, intercept = fit_slope(ts, metric)
        slopes.append(
            {"algo": algo, "K": K, "num_T": len(ts), "decades": decades,
             "slope": slope, "intercept": intercept}
        )

    speedups = []
    by_algo_t: dict[tuple, dict[int, float]] = {}
    for cell in cells:
        by_algo_t.setdefault((cell["algo"], cell["T"]), {})[cell["K"]] = cell["min_grad_norm_mean"]
    for (algo, T), metric_by_k in sorted(by_algo_t.items()):
        if len(metric_by_k) >= 2 and all(v > 0 for v in metric_by_k.values()):
            speedups.append({"algo": algo, "T": T, "rows": speedup_table(metric_by_k)})

    return {"cells": cells, "slopes": slopes, "speedup": speedups}


SUMMARY_CSV_COLUMNS = (
    "algo", "K", "T", "seeds", "avg_grad_norm_mean", "avg_grad_norm_stderr",
    "min_grad_norm_mean", "min_grad_norm_stderr", "sum_grad_sq_mean", "final_f_mean",
    "epsilon", "ifo_to_epsilon_mean", "ifo_to_epsilon_hits",
)


def write_summary(summary: dict, out_dir):
    write_json(summary, os.path.join(out_dir, "sweep_summary.json"))
    path = os.path.join(out_dir, "sweep_summary.csv")
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SUMMARY_CSV_COLUMNS)
        for cell in summary["cells"]:
            writer.writerow(["" if cell[c] is None else _fmt(cell[c]) for c in SUMMARY_CSV_COLUMNS])
    os.replace(tmp, path)


def cli_sweep(config_path, k_csv=None, seed_count=None, out_dir=None) -> dict:
    """Back the `sweep` subcommand: optional K/seed overrides plus a summary."""
    config = load_config(config_path)
    if k_csv is not None:
        try:
            k_list = tuple(int(part) for part in k_csv.split(","))
        except ValueError:
            raise ValidationFailure(f"--k expects comma-separated integers, got {k_csv!r}")
        config = RunConfig(**{**config.__dict__, "k_list": k_list})
        if any(k < 1 for k in k_list):
            raise ValidationFailure("k_list entries must be >= 1")
        if "centers" in config.problem and set(k_list) != {config.problem.get("k")}:
            raise ValidationFailure("k_list cannot resize a problem with explicit centers")
    if seed_count is not None:
        if seed_count < 1:
            raise ValidationFailure("--seeds must be >= 1")
        config = RunConfig(**{**config.__dict__, "seeds": tuple(range(seed_count))})
    target = out_dir if out_dir is not None else config.out_dir
    if target is None:
        raise ValidationFailure("no output directory: set 'out_dir' in the config or pass --out")
    aggregates = run_cells(config, target)
    summary = summarize(aggregates, config.epsilon)
    write_summary(summary, target)
    return summary
