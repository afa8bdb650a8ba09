"""Command line entry point: ``dop run`` and ``dop summarize``."""

from __future__ import annotations

import argparse
import sys

from .bench import SchemaError, load_config, run_experiment, summarize


def build_parser():
    parser = argparse.ArgumentParser(prog="dop", description="Q-pruned UCT experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment and write a CSV of per-iteration metrics")
    run.add_argument("--config", required=True, help="flat key = value configuration file")
    run.add_argument("--algo", dest="algorithm", help="algorithm name (overrides the config)")
    run.add_argument("--env", help="environment name (overrides the config)")
    run.add_argument("--seed", type=int, help="master seed (overrides the config)")
    run.add_argument("--out", help="output CSV path (overrides the config)")

    summ = sub.add_parser("summarize", help="aggregate result CSVs per algorithm and iteration")
    summ.add_argument("--in", dest="inputs", nargs="+", required=True, help="result CSV files")
    summ.add_argument("--out", required=True, help="summary CSV path")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            cfg = load_config(args.config).override(
                algorithm=args.algorithm, env=args.env, seed=args.seed, out=args.out)
            records = run_experiment(cfg)
            print(f"wrote {len(records)} rows to {cfg.out}")
        else:
            table = summarize(args.inputs, args.out)
            print(f"wrote {len(table)} rows to {args.out}")
    except (SchemaError, ValueError, OSError) as exc:
        print(f"dop: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
