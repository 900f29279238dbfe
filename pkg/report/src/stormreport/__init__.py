"""Figure and markdown-summary generation for optimizer sweep outputs.

This package consumes the files the simulator's harness writes — per-run
metrics CSVs with their JSON metadata sidecars — purely as files; it has
no dependency on the simulator itself.
"""

from .analysis import (
    AlgoPanel,
    CellStats,
    SeriesBand,
    SlopeFit,
    SpeedupSeries,
    cell_stats,
    convergence_panels,
    display_name,
    fit_slope,
    mean_stderr,
    seed_band,
    slope_fits,
    speedup_series,
)
from .errors import EmptyInputError, ReportError, SchemaError
from .figures import make_convergence_figure, make_speedup_figure, render_convergence, render_speedup
from .schema import METRICS_COLUMNS, ReportInput, RunTable, load_run, load_runs
from .summary import summary_markdown, write_summary

__version__ = "0.1.0"
