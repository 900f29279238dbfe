"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 unknown config key,
3 constant-validation failure (the message cites the violated inequality).
"""

from __future__ import annotations

import argparse
import json
import sys

from numpy.random import Generator, Philox

from .errors import StormdistError, UnknownConfigKey, ValidationFailure
from .harness import cli_run, cli_sweep
from .problems import estimate_constants, fd_check, mix64, problem_from_json, sample_region_point


def _load_problem(path):
    with open(path) as fh:
        return problem_from_json(json.load(fh))


def _cmd_run(args) -> int:
    aggregates = cli_run(args.config, out_dir=args.out, trace_path=args.trace)
    for agg in aggregates:
        print(f"{agg['run_id']}: avg_grad_norm={agg['avg_grad_norm']:.6g} "
              f"min_grad_norm={agg['min_grad_norm']:.6g}")
    return 0


def _cmd_sweep(args) -> int:
    summary = cli_sweep(args.config, k_csv=args.k, seed_count=args.seeds, out_dir=args.out)
    for cell in summary["cells"]:
        print(f"{cell['algo']} K={cell['K']} T={cell['T']}: "
              f"avg_grad_norm={cell['avg_grad_norm_mean']:.6g} "
              f"min_grad_norm={cell['min_grad_norm_mean']:.6g} ({cell['seeds']} seeds)")
    for s in summary["slopes"]:
        print(f"{s['algo']} K={s['K']}: slope={s['slope']:.4f} over {s['num_T']} horizons")
    return 0


def _cmd_check_grad(args) -> int:
    spec = _load_problem(args.problem)
    rng = Generator(Philox(key=mix64(args.seed, 0xFD)))
    worst = 0.0
    for _ in range(args.points):
        worst = max(worst, fd_check(spec, sample_region_point(spec, rng)))
    ok = worst <= args.tol
    print(json.dumps({"points": args.points, "max_rel_err": worst, "tol": args.tol, "pass": ok}))
    return 0 if ok else 1


def _cmd_estimate(args) -> int:
    spec = _load_problem(args.problem)
    print(json.dumps(estimate_constants(spec, args.seed, args.samples), indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stormdist", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="execute a config's run grid")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="output directory (overrides config out_dir)")
    p.add_argument("--trace", default=None, help="dump encoded messages to this path")
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("sweep", help="run a grid and write a sweep summary")
    p.add_argument("--config", required=True)
    p.add_argument("--k", default=None, help="comma-separated worker counts, e.g. 1,4,16,64")
    p.add_argument("--seeds", type=int, default=None, help="use seeds 0..N-1")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_sweep)

    p = sub.add_parser("check-grad", help="finite-difference audit of problem gradients")
    p.add_argument("--problem", required=True, help="problem JSON file")
    p.add_argument("--points", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_check_grad)

    p = sub.add_parser("estimate", help="Monte-Carlo check of declared constants")
    p.add_argument("--problem", required=True, help="problem JSON file")
    p.add_argument("--samples", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_estimate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except UnknownConfigKey as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValidationFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except StormdistError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
