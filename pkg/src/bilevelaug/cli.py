"""Command-line front end.

    bilevelaug run --config cfg.json [--seed N] [--out DIR]
    bilevelaug summarize DIR [DIR ...] [--csv PATH]
    bilevelaug gradcheck [--cases N]
    bilevelaug oracle

Exit codes: 0 success, 1 runtime failure, 2 config error.
Set BILEVEL_CHECKED=1 to enable NaN/Inf guards on every op.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from .config import ConfigError, load_config


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bilevelaug", description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one experiment from a JSON config")
    p_run.add_argument("--config", required=True, help="path to the experiment config (JSON)")
    p_run.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_run.add_argument("--out", default=None, help="output directory (default: runs/<mode>-seed<N>)")

    p_sum = sub.add_parser("summarize", help="aggregate completed run directories")
    p_sum.add_argument("dirs", nargs="+", help="run directories containing summary.json")
    p_sum.add_argument("--csv", default=None, help="also write the comparison table as CSV")

    p_grad = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p_grad.add_argument("--cases", type=int, default=100, help="random cases per op")

    sub.add_parser("oracle", help="run the analytic/unroll hypergradient oracle suite")
    return parser


def _cmd_run(args) -> int:
    try:
        config = load_config(args.config)
        if args.seed is not None:
            config = config.with_seed(args.seed).validate()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out_dir = args.out or str(Path("runs") / f"{config.mode}-seed{config.seed}")
    from .experiment import run_experiment

    try:
        summary = run_experiment(config, out_dir)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - runtime failures map to exit 1
        print(f"run failed: {exc}", file=sys.stderr)
        return 1
    print(f"mode={summary['mode']} seed={summary['seed']} test_accuracy={summary['test_accuracy']:.4f}")
    print(f"artifacts in {out_dir}")
    return 0


def _cmd_summarize(args) -> int:
    from .experiment import summarize

    try:
        table, rows = summarize(args.dirs)
    except (FileNotFoundError, ValueError) as exc:
        print(f"summarize failed: {exc}", file=sys.stderr)
        return 1
    print(table)
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    return 0


def _cmd_gradcheck(args) -> int:
    from .checks import gradient_suite

    results = gradient_suite(cases_per_op=args.cases)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def _cmd_oracle(_args) -> int:
    from .checks import oracle_suite

    results = oracle_suite()
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handler = {
        "run": _cmd_run,
        "summarize": _cmd_summarize,
        "gradcheck": _cmd_gradcheck,
        "oracle": _cmd_oracle,
    }[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
