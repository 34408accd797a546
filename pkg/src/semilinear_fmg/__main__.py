"""Command line entry point: ``python -m semilinear_fmg run|adaptive ...``."""

from __future__ import annotations

import argparse
import os
import sys

# single-threaded numerics keep the timing columns interpretable
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

from .bench import (
    ADAPTIVE_COLUMNS,
    UNIFORM_COLUMNS,
    BenchError,
    PostconditionError,
    check_postconditions,
    config_from_args,
    emit_csv,
    run_adaptive,
    run_uniform,
)
from .problems import PROBLEMS


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semilinear-fmg",
        description="Full multigrid with one-step corrections for semilinear elliptic problems.",
    )
    parser.add_argument("--seed", type=int, default=None, help="seed for sampled property checks")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="uniform hierarchy: errors and times per level")
    run.add_argument("--problem", choices=sorted(PROBLEMS))
    run.add_argument("--levels", type=int, metavar="N")
    run.add_argument("--base", type=int, metavar="N", help="cells per unit length of the first mesh")
    run.add_argument("--m", type=int, metavar="N", help="V-cycles per correction step")
    run.add_argument("--p", type=int, metavar="N", help="correction steps per level")
    run.add_argument("--coarse-index", dest="coarse_index", type=int, metavar="N")
    run.add_argument("--out", metavar="PATH", help="CSV file, '-' for stdout (default)")
    run.add_argument("--config", metavar="PATH", help="file of 'key = value' lines")

    ada = sub.add_parser("adaptive", help="adaptive refinement loop")
    ada.add_argument("--problem", choices=sorted(PROBLEMS))
    ada.add_argument("--iters", type=int, metavar="N")
    ada.add_argument("--theta-mark", dest="theta_mark", type=float, metavar="F")
    ada.add_argument("--base", type=int, metavar="N")
    ada.add_argument("--m", type=int, metavar="N")
    ada.add_argument("--p", type=int, metavar="N")
    ada.add_argument("--out", metavar="PATH")
    ada.add_argument("--config", metavar="PATH")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        adaptive = args.command == "adaptive"
        cfg = config_from_args(args, adaptive)
        if adaptive:
            rows, _ = run_adaptive(cfg)
            columns = ADAPTIVE_COLUMNS
        else:
            rows, _ = run_uniform(cfg)
            columns = UNIFORM_COLUMNS
        issues = check_postconditions(cfg, rows)
        emit_csv(rows, cfg.out, columns)
        if issues:
            raise PostconditionError("; ".join(issues))
    except BenchError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
