"""Markdown summary tying the figures and headline numbers together."""

from __future__ import annotations

import os

from .analysis import (
    SLOPE_MIN_DECADES,
    SLOPE_MIN_POINTS,
    cell_stats,
    display_name,
    slope_fits,
    speedup_series,
)
from .schema import ReportInput


def _pm(mean: float, stderr: float) -> str:
    return f"{mean:.6g} ± {stderr:.2g}"


def summary_markdown(
    data: ReportInput,
    *,
    convergence_image: str,
    speedup_image: str | None,
    speedup_note: str | None = None,
) -> str:
    """Build the whole report body; image paths are kept relative."""
    runs = data.runs
    algos = sorted({run.algo for run in runs})
    names = ", ".join(display_name(a) for a in sorted(algos, key=lambda a: display_name(a)))
    lines = [
        "# Sweep report",
        "",
        f"Comparing {names} over {len(runs)} runs.",
    ]
    if data.diverged:
        lines[-1] += f" {len(data.diverged)} diverged runs were excluded (listed below)."

    lines += ["", "## Convergence", "", f"![Convergence curves]({convergence_image})", ""]

    lines += [
        "### Per-cell statistics",
        "",
        "| algorithm | K | T | seeds | avg grad norm | min grad norm | final f |",
        "|---|---|---|---|---|---|---|",
    ]
    for c in cell_stats(runs):
        lines.append(
            f"| {display_name(c.algo)} | {c.K} | {c.T} | {c.seeds} "
            f"| {_pm(c.avg_grad_norm_mean, c.avg_grad_norm_stderr)} "
            f"| {_pm(c.min_grad_norm_mean, c.min_grad_norm_stderr)} "
            f"| {c.final_f_mean:.6g} |"
        )

    lines += ["", "### Fitted decay slopes (log10 avg grad norm vs log10 T)", ""]
    fits = slope_fits(runs)
    if fits:
        lines += [
            "| algorithm | K | horizons | decades | slope | intercept |",
            "|---|---|---|---|---|---|",
        ]
        for f in fits:
            lines.append(
                f"| {display_name(f.algo)} | {f.K} | {f.num_T} | {f.decades:.3f} "
                f"| {f.slope:.4f} | {f.intercept:.4f} |"
            )
    else:
        lines.append(
            f"No decay fit: a slope needs at least {SLOPE_MIN_POINTS} distinct horizons "
            f"spanning {SLOPE_MIN_DECADES:.0f} decades."
        )

    lines += ["", "## Speedup", ""]
    if speedup_image is not None:
        lines += [f"![Speedup across worker counts]({speedup_image})", ""]
        for s in speedup_series(runs):
            k_max = int(s.K[-1])
            lines += [
                f"### {s.label} at T={s.T}",
                "",
                f"| K | best grad norm | ratio vs K={k_max} | ideal (K_max/K)^(1/3) |",
                "|---|---|---|---|",
            ]
            for k, metric, stderr in zip(s.K, s.metric, s.stderr):
                ratio = metric / s.metric[-1]
                reference = (k_max / float(k)) ** (1.0 / 3.0)
                lines.append(
                    f"| {int(k)} | {_pm(metric, stderr)} | {ratio:.3f} | {reference:.3f} |"
                )
            lines.append("")
        if lines[-1] == "":
            lines.pop()
    else:
        lines.append(f"Speedup figure skipped: {speedup_note}")

    if data.diverged:
        lines += ["", "## Diverged runs", ""]
        lines += [f"- {run_id}" for run_id in data.diverged]

    return "\n".join(lines) + "\n"


def write_summary(
    data: ReportInput,
    out_dir: str,
    *,
    convergence_image: str,
    speedup_image: str | None,
    speedup_note: str | None = None,
) -> str:
    """Write summary.md into out_dir and return its path."""
    text = summary_markdown(
        data,
        convergence_image=convergence_image,
        speedup_image=speedup_image,
        speedup_note=speedup_note,
    )
    path = os.path.join(out_dir, "summary.md")
    with open(path, "w") as fh:
        fh.write(text)
    return path
