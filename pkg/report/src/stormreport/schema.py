"""Load and validate per-run metrics files written by the sweep harness.

The harness emits one ``<run_id>.csv`` per run (one row per round, fixed
column list) plus a ``<run_id>.json`` metadata sidecar, and optionally a
``sweep_summary.csv``/``.json`` pair for the whole grid. This module reads
the per-run files back, rejecting anything that does not match the schema
with an error that names the offending column, and returns immutable
arrays ready for aggregation. Input files are only ever opened for
reading.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass
from glob import glob

import numpy as np

from .errors import EmptyInputError, SchemaError

# Exact header of a per-run metrics CSV, in order.
METRICS_COLUMNS = (
    "run_id", "algo", "K", "d", "t", "eta", "a", "grad_norm", "f_val", "err_norm",
    "potential", "ifo_per_worker", "bytes_up", "bytes_down", "clamped", "out_of_region",
)

_INT_COLUMNS = ("K", "d", "t", "ifo_per_worker", "bytes_up", "bytes_down")
_FLOAT_COLUMNS = ("eta", "a", "grad_norm", "f_val", "err_norm", "potential")
_BOOL_COLUMNS = ("clamped", "out_of_region")

# Grid-level summary files live next to the per-run files but have their
# own schema; they are outputs of the harness, not runs to plot.
_SUMMARY_BASENAMES = {"sweep_summary.csv"}


@dataclass(frozen=True)
class RunTable:
    """One run's metrics, validated and typed."""

    path: str
    run_id: str
    algo: str
    K: int
    d: int
    T: int
    seed: int | None
    t: np.ndarray
    grad_norm: np.ndarray
    f_val: np.ndarray


@dataclass(frozen=True)
class ReportInput:
    """Everything usable found in an input directory."""

    runs: tuple[RunTable, ...]
    diverged: tuple[str, ...]


def _frozen(values, dtype) -> np.ndarray:
    arr = np.asarray(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


def _float_column(name: str, col: str, texts) -> np.ndarray:
    try:
        arr = np.asarray(texts, dtype=np.float64)
    except ValueError:
        for i, text in enumerate(texts):
            try:
                float(text)
            except ValueError:
                raise SchemaError(
                    f"{name}: column '{col}': cannot parse {text!r} as a number (data row {i + 1})"
                ) from None
        raise
    if not np.isfinite(arr).all():
        i = int(np.nonzero(~np.isfinite(arr))[0][0])
        raise SchemaError(
            f"{name}: column '{col}': non-finite value {texts[i]!r} (data row {i + 1})"
        )
    return arr


def _int_column(name: str, col: str, texts) -> np.ndarray:
    try:
        return np.asarray(texts, dtype=np.int64)
    except (ValueError, OverflowError):
        for i, text in enumerate(texts):
            try:
                int(text)
            except ValueError:
                raise SchemaError(
                    f"{name}: column '{col}': cannot parse {text!r} as an integer (data row {i + 1})"
                ) from None
        raise


def _check_bool_column(name: str, col: str, texts) -> None:
    for i, text in enumerate(texts):
        if text not in ("True", "False"):
            raise SchemaError(
                f"{name}: column '{col}': expected 'True' or 'False', found {text!r} (data row {i + 1})"
            )


def _check_constant(name: str, col: str, texts) -> str:
    first = texts[0]
    for i, text in enumerate(texts):
        if text != first:
            raise SchemaError(
                f"{name}: column '{col}': value changes within one run "
                f"({first!r} vs {text!r} at data row {i + 1})"
            )
    return first


def _check_header(name: str, header) -> None:
    if list(header) == list(METRICS_COLUMNS):
        return
    for i, expected in enumerate(METRICS_COLUMNS):
        found = header[i] if i < len(header) else None
        if found != expected:
            raise SchemaError(
                f"{name}: header column {i + 1} must be '{expected}', found "
                + (f"'{found}'" if found is not None else "nothing")
            )
    raise SchemaError(f"{name}: unexpected extra column '{header[len(METRICS_COLUMNS)]}'")


def _read_sidecar(csv_path: str):
    """Return the metadata dict for a metrics CSV, or None if absent."""
    path = os.path.splitext(csv_path)[0] + ".json"
    if not os.path.exists(path):
        return None
    name = os.path.basename(path)
    try:
        with open(path) as fh:
            meta = json.load(fh)
    except ValueError as exc:
        raise SchemaError(f"{name}: invalid metadata JSON ({exc})") from None
    if not isinstance(meta, dict):
        raise SchemaError(f"{name}: metadata JSON must be an object")
    return meta


def _cross_check(name: str, meta: dict, field: str, from_csv) -> None:
    if field in meta and meta[field] != from_csv:
        raise SchemaError(
            f"{name}: field '{field}' is {meta[field]!r} in the metadata "
            f"but {from_csv!r} in the CSV"
        )


def load_run(csv_path: str) -> RunTable | None:
    """Parse one metrics CSV (plus sidecar); None if the run diverged."""
    name = os.path.basename(csv_path)
    meta = _read_sidecar(csv_path)
    if meta is not None and meta.get("diverged"):
        return None

    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{name}: file is empty (no header row)") from None
        _check_header(name, header)
        rows = list(reader)

    if not rows:
        raise SchemaError(f"{name}: no data rows")
    for i, row in enumerate(rows):
        if len(row) != len(METRICS_COLUMNS):
            raise SchemaError(
                f"{name}: data row {i + 1} has {len(row)} fields, expected {len(METRICS_COLUMNS)}"
            )

    cols = dict(zip(METRICS_COLUMNS, zip(*rows)))
    run_id = _check_constant(name, "run_id", cols["run_id"])
    algo = _check_constant(name, "algo", cols["algo"])
    K = int(_check_constant(name, "K", cols["K"]))
    d = int(_check_constant(name, "d", cols["d"]))

    t = _int_column(name, "t", cols["t"])
    if not np.array_equal(t, np.arange(1, len(rows) + 1)):
        raise SchemaError(f"{name}: column 't': rounds must run 1..{len(rows)} consecutively")
    floats = {col: _float_column(name, col, cols[col]) for col in _FLOAT_COLUMNS}
    for col in ("ifo_per_worker", "bytes_up", "bytes_down"):
        _int_column(name, col, cols[col])
    for col in _BOOL_COLUMNS:
        _check_bool_column(name, col, cols[col])

    seed = None
    if meta is not None:
        _cross_check(name, meta, "run_id", run_id)
        _cross_check(name, meta, "algo", algo)
        _cross_check(name, meta, "K", K)
        _cross_check(name, meta, "T", len(rows))
        if "master_seed" in meta:
            seed = int(meta["master_seed"])

    return RunTable(
        path=csv_path,
        run_id=run_id,
        algo=algo,
        K=K,
        d=d,
        T=len(rows),
        seed=seed,
        t=_frozen(t, np.int64),
        grad_norm=_frozen(floats["grad_norm"], np.float64),
        f_val=_frozen(floats["f_val"], np.float64),
    )


def load_runs(in_dir: str) -> ReportInput:
    """Load every per-run CSV in a directory.

    Diverged runs (flagged in their metadata sidecar) are collected
    separately rather than plotted. The result is sorted so downstream
    artifacts do not depend on filesystem enumeration order.
    """
    if not os.path.isdir(in_dir):
        raise EmptyInputError(f"input directory not found: {in_dir}")
    paths = sorted(
        p for p in glob(os.path.join(in_dir, "*.csv"))
        if os.path.basename(p) not in _SUMMARY_BASENAMES
    )
    if not paths:
        raise EmptyInputError(f"no metrics CSVs found in {in_dir}")

    runs: list[RunTable] = []
    diverged: list[str] = []
    for path in paths:
        table = load_run(path)
        if table is None:
            diverged.append(os.path.splitext(os.path.basename(path))[0])
        else:
            runs.append(table)
    if not runs:
        raise EmptyInputError(
            f"no usable runs in {in_dir}: all {len(diverged)} present runs diverged"
        )
    runs.sort(key=lambda r: (r.algo, r.K, r.T, -1 if r.seed is None else r.seed, r.run_id))
    return ReportInput(runs=tuple(runs), diverged=tuple(diverged))
