"""Render the two report figures from a directory of run files.

Both entry points load and validate the directory themselves, so they can
be used standalone; the CLI loads once and calls the render helpers
directly. Rendering uses the Agg backend and writes a single PNG per
figure — no display is ever opened.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
from matplotlib.ticker import NullFormatter, ScalarFormatter
import numpy as np

from .analysis import AlgoPanel, SpeedupSeries, convergence_panels, speedup_series
from .errors import ReportError
from .schema import load_runs


def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def _positive_floor(lower: np.ndarray) -> np.ndarray:
    # log-scale bands cannot cross zero; break the band there instead
    return np.where(lower > 0, lower, np.nan)


def render_convergence(panels: tuple[AlgoPanel, ...], out_path: str) -> None:
    if not panels:
        raise ReportError("convergence figure: nothing to plot")
    _ensure_parent(out_path)
    fig, axes = plt.subplots(
        1, len(panels), figsize=(5.5 * len(panels), 4.4), squeeze=False, sharey=False
    )
    for ax, panel in zip(axes[0], panels):
        for band in panel.series:
            (line,) = ax.plot(
                band.t, band.mean,
                label=f"K={band.K} ({band.seeds} seed{'s' if band.seeds != 1 else ''}, T={band.T})",
                linewidth=1.2,
            )
            if band.seeds > 1:
                ax.fill_between(
                    band.t,
                    _positive_floor(band.mean - band.stderr),
                    band.mean + band.stderr,
                    color=line.get_color(), alpha=0.25, linewidth=0,
                )
        if panel.slopes:
            text = "\n".join(
                f"K={f.K}: slope {f.slope:+.4f} over {f.num_T} horizons" for f in panel.slopes
            )
            ax.text(
                0.03, 0.04, text, transform=ax.transAxes, fontsize=8,
                va="bottom", ha="left",
                bbox={"boxstyle": "round", "facecolor": "white", "alpha": 0.7},
            )
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_title(panel.label)
        ax.set_xlabel("round t")
        ax.set_ylabel("gradient norm")
        ax.grid(True, which="both", alpha=0.25)
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=130)
    plt.close(fig)


def render_speedup(series: tuple[SpeedupSeries, ...], out_path: str) -> None:
    if not series:
        raise ReportError("speedup figure: nothing to plot")
    _ensure_parent(out_path)
    fig, ax = plt.subplots(figsize=(6.0, 4.4))
    for i, s in enumerate(series):
        ax.errorbar(
            s.K, s.metric,
            yerr=[np.minimum(s.stderr, s.metric * 0.999), s.stderr],
            marker="o", capsize=3, linewidth=1.2,
            label=f"{s.label} (T={s.T})",
        )
        ax.plot(
            s.K, s.guide, "--", color="gray", linewidth=1.0,
            label="ideal K^(-1/3)" if i == 0 else None,
        )
    ax.set_xscale("log")
    ax.set_yscale("log")
    ticks = sorted({int(k) for s in series for k in s.K})
    ax.set_xticks(ticks)
    ax.xaxis.set_major_formatter(ScalarFormatter())
    ax.xaxis.set_minor_formatter(NullFormatter())
    ax.set_xlabel("workers K")
    ax.set_ylabel("best gradient norm")
    ax.set_title("Speedup with worker count")
    ax.grid(True, which="both", alpha=0.25)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=130)
    plt.close(fig)


def make_convergence_figure(in_dir: str, out_path: str) -> tuple[AlgoPanel, ...]:
    """Write the per-algorithm convergence figure; returns what was drawn."""
    panels = convergence_panels(load_runs(in_dir).runs)
    render_convergence(panels, out_path)
    return panels


def make_speedup_figure(in_dir: str, out_path: str) -> tuple[SpeedupSeries, ...]:
    """Write the metric-vs-K figure; returns what was drawn.

    Needs at least two distinct worker counts for some (algorithm, T)
    pair; a single-K sweep has no speedup to show and is rejected with an
    explanation rather than an empty plot.
    """
    runs = load_runs(in_dir).runs
    series = speedup_series(runs)
    if not series:
        ks = sorted({run.K for run in runs})
        raise ReportError(
            "speedup figure needs at least two distinct worker counts for one "
            f"algorithm and horizon; found K={ks}"
        )
    render_speedup(series, out_path)
    return series
