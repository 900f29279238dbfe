"""Aggregation behind the figures and the markdown summary.

Everything here is pure: runs in, plain arrays and dataclasses out. The
statistics intentionally mirror what the sweep harness publishes in
``sweep_summary.json`` — per-run means first, then a mean and standard
error across seeds, and a least-squares slope of log10(metric) against
log10(T) — so numbers quoted in the report agree with the summary file to
floating-point accuracy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .schema import RunTable

# A slope is only quoted when the horizon grid can support one: at least
# this many distinct T values spanning at least two decades.
SLOPE_MIN_POINTS = 4
SLOPE_MIN_DECADES = 2.0 - 1e-9

_DISPLAY_NAMES = {"adstorm": "AD-STORM", "dstorm": "D-STORM", "dsgd": "D-SGD"}
_ALGO_ORDER = {"adstorm": 0, "dstorm": 1, "dsgd": 2}


def display_name(algo: str) -> str:
    return _DISPLAY_NAMES.get(algo, algo)


def algo_sort_key(algo: str) -> tuple:
    return (_ALGO_ORDER.get(algo, len(_ALGO_ORDER)), algo)


def seed_band(curves) -> tuple[np.ndarray, np.ndarray]:
    """Pointwise mean and standard error across equal-length seed curves.

    The standard error is the ddof=1 standard deviation over seeds divided
    by sqrt(#seeds); a single curve gets a zero-width band.
    """
    stack = np.asarray(curves, dtype=np.float64)
    if stack.ndim != 2 or stack.shape[0] < 1:
        raise ValueError("seed_band expects a non-empty list of equal-length curves")
    mean = stack.mean(axis=0)
    if stack.shape[0] == 1:
        return mean, np.zeros_like(mean)
    return mean, stack.std(axis=0, ddof=1) / math.sqrt(stack.shape[0])


def mean_stderr(values) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 1:
        return float(arr[0]), 0.0
    return float(arr.mean()), float(arr.std(ddof=1) / math.sqrt(arr.size))


def fit_slope(ts, values) -> tuple[float, float]:
    """Least-squares slope and intercept of log10(values) vs log10(ts)."""
    ts = np.asarray(ts, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if not ((ts > 0).all() and (values > 0).all()):
        raise ValueError("slope fit needs positive horizons and metric values")
    slope, intercept = np.polyfit(np.log10(ts), np.log10(values), 1)
    return float(slope), float(intercept)


@dataclass(frozen=True)
class CellStats:
    """Seed-aggregated scalars for one (algo, K, T) grid cell."""

    algo: str
    K: int
    T: int
    seeds: int
    avg_grad_norm_mean: float
    avg_grad_norm_stderr: float
    min_grad_norm_mean: float
    min_grad_norm_stderr: float
    final_f_mean: float


@dataclass(frozen=True)
class SeriesBand:
    """One seed-averaged convergence curve."""

    K: int
    T: int
    seeds: int
    t: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray


@dataclass(frozen=True)
class SlopeFit:
    """Across-horizon decay fit for one (algo, K)."""

    algo: str
    K: int
    num_T: int
    decades: float
    slope: float
    intercept: float


@dataclass(frozen=True)
class AlgoPanel:
    """Everything one algorithm's convergence panel shows."""

    algo: str
    label: str
    series: tuple[SeriesBand, ...]
    slopes: tuple[SlopeFit, ...]


@dataclass(frozen=True)
class SpeedupSeries:
    """Metric vs worker count for one (algo, T), with the ideal guide."""

    algo: str
    label: str
    T: int
    K: np.ndarray
    metric: np.ndarray
    stderr: np.ndarray
    guide: np.ndarray


def _by_cell(runs) -> dict[tuple, list[RunTable]]:
    cells: dict[tuple, list[RunTable]] = {}
    for run in runs:
        cells.setdefault((run.algo, run.K, run.T), []).append(run)
    return cells


def cell_stats(runs) -> tuple[CellStats, ...]:
    """Collapse runs to per-cell statistics, ordered for display."""
    out = []
    for (algo, K, T), group in _by_cell(runs).items():
        avg_mean, avg_se = mean_stderr([run.grad_norm.mean() for run in group])
        min_mean, min_se = mean_stderr([run.grad_norm.min() for run in group])
        out.append(
            CellStats(
                algo=algo, K=K, T=T, seeds=len(group),
                avg_grad_norm_mean=avg_mean, avg_grad_norm_stderr=avg_se,
                min_grad_norm_mean=min_mean, min_grad_norm_stderr=min_se,
                final_f_mean=mean_stderr([run.f_val[-1] for run in group])[0],
            )
        )
    out.sort(key=lambda c: (algo_sort_key(c.algo), c.K, c.T))
    return tuple(out)


def slope_fits(runs) -> tuple[SlopeFit, ...]:
    """Fit metric decay against T for every (algo, K) with enough horizons.

    The metric is the per-run mean gradient norm, averaged across seeds at
    each horizon.
    """
    by_algo_k: dict[tuple, dict[int, list[RunTable]]] = {}
    for run in runs:
        by_algo_k.setdefault((run.algo, run.K), {}).setdefault(run.T, []).append(run)

    fits = []
    for (algo, K), by_t in by_algo_k.items():
        ts = sorted(by_t)
        if len(ts) < SLOPE_MIN_POINTS:
            continue
        decades = math.log10(max(ts) / min(ts))
        if decades < SLOPE_MIN_DECADES:
            continue
        metric = [float(np.mean([run.grad_norm.mean() for run in by_t[t]])) for t in ts]
        slope, intercept = fit_slope(ts, metric)
        fits.append(SlopeFit(algo=algo, K=K, num_T=len(ts), decades=decades,
                             slope=slope, intercept=intercept))
    fits.sort(key=lambda f: (algo_sort_key(f.algo), f.K))
    return tuple(fits)


def convergence_panels(runs) -> tuple[AlgoPanel, ...]:
    """One panel per algorithm: per-K seed-averaged curves plus slope fits.

    When a (algo, K) pair was run at several horizons, the longest run is
    plotted (shorter horizons retrace its prefix) and the horizons feed
    the slope annotation instead.
    """
    fits = slope_fits(runs)
    by_algo: dict[str, dict[int, dict[int, list[RunTable]]]] = {}
    for run in runs:
        by_algo.setdefault(run.algo, {}).setdefault(run.K, {}).setdefault(run.T, []).append(run)

    panels = []
    for algo in sorted(by_algo, key=algo_sort_key):
        series = []
        for K in sorted(by_algo[algo]):
            by_t = by_algo[algo][K]
            T = max(by_t)
            group = by_t[T]
            mean, stderr = seed_band([run.grad_norm for run in group])
            series.append(
                SeriesBand(K=K, T=T, seeds=len(group), t=group[0].t, mean=mean, stderr=stderr)
            )
        panels.append(
            AlgoPanel(
                algo=algo,
                label=display_name(algo),
                series=tuple(series),
                slopes=tuple(f for f in fits if f.algo == algo),
            )
        )
    return tuple(panels)


def speedup_series(runs) -> tuple[SpeedupSeries, ...]:
    """Per (algo, T): seed-mean of each run's best gradient norm vs K.

    Only groups with at least two distinct worker counts make a series.
    The guide line is the ideal K^(-1/3) decay anchored at the smallest
    worker count in the series.
    """
    by_group: dict[tuple, dict[int, list[RunTable]]] = {}
    for run in runs:
        by_group.setdefault((run.algo, run.T), {}).setdefault(run.K, []).append(run)

    out = []
    for (algo, T) in sorted(by_group, key=lambda key: (algo_sort_key(key[0]), key[1])):
        by_k = by_group[(algo, T)]
        if len(by_k) < 2:
            continue
        ks = np.asarray(sorted(by_k), dtype=np.int64)
        stats = [mean_stderr([run.grad_norm.min() for run in by_k[k]]) for k in ks]
        metric = np.asarray([m for m, _ in stats])
        stderr = np.asarray([se for _, se in stats])
        if not (metric > 0).all():
            continue
        guide = metric[0] * (ks[0] / ks.astype(np.float64)) ** (1.0 / 3.0)
        out.append(
            SpeedupSeries(
                algo=algo, label=display_name(algo), T=T,
                K=ks, metric=metric, stderr=stderr, guide=guide,
            )
        )
    return tuple(out)
