"""Command-line entry point for the report generator.

Reads a directory of per-run metrics CSVs and metadata JSONs, writes
``convergence.png``, ``speedup.png`` (when more than one worker count is
present), and ``summary.md`` into the output directory. Input files are
never modified and re-running produces identical artifacts.

Exit codes: 0 success, 1 empty or unusable input, 2 schema violation
(the message names the offending column or field).
"""

from __future__ import annotations

import argparse
import os
import sys

from .analysis import convergence_panels, speedup_series
from .errors import EmptyInputError, ReportError, SchemaError
from .figures import render_convergence, render_speedup
from .schema import load_runs
from .summary import write_summary

CONVERGENCE_PNG = "convergence.png"
SPEEDUP_PNG = "speedup.png"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stormdist-report", description=__doc__)
    parser.add_argument("--in", dest="in_dir", required=True, help="directory of sweep outputs")
    parser.add_argument("--out", dest="out_dir", required=True, help="directory for the artifacts")
    return parser


def generate(in_dir: str, out_dir: str) -> list[str]:
    """Produce every artifact; returns the paths written."""
    data = load_runs(in_dir)
    os.makedirs(out_dir, exist_ok=True)
    written = []

    panels = convergence_panels(data.runs)
    convergence_path = os.path.join(out_dir, CONVERGENCE_PNG)
    render_convergence(panels, convergence_path)
    written.append(convergence_path)

    series = speedup_series(data.runs)
    speedup_image = None
    speedup_note = None
    if series:
        speedup_path = os.path.join(out_dir, SPEEDUP_PNG)
        render_speedup(series, speedup_path)
        written.append(speedup_path)
        speedup_image = SPEEDUP_PNG
    else:
        ks = sorted({run.K for run in data.runs})
        speedup_note = (
            "needs at least two distinct worker counts for one algorithm "
            f"and horizon; found K={ks}"
        )

    written.append(
        write_summary(
            data, out_dir,
            convergence_image=CONVERGENCE_PNG,
            speedup_image=speedup_image,
            speedup_note=speedup_note,
        )
    )
    return written


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        for path in generate(args.in_dir, args.out_dir):
            print(f"wrote {path}")
        return 0
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (EmptyInputError, ReportError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
