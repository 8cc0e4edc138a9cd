"""Command line: ``ssfl run|mask-study|validate <config>``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from ssfl.experiment import ConfigError, load_config, run_experiment, run_mask_study


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssfl", description="Sparse federated learning simulator.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-round progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, jobs=False):
        p.add_argument("config", help="JSON experiment config")
        p.add_argument("--seed", type=int, help="run this single seed instead of the config's seed list")
        p.add_argument("--out", help="output directory (overrides output.dir)")
        if jobs:
            p.add_argument("--jobs", type=int, default=1, help="parallel (variant, seed) runs")

    common(sub.add_parser("run", help="train every variant and seed, write metrics and summaries"), jobs=True)
    common(sub.add_parser("mask-study", help="mask error against the full-data mask vs minibatch count"))
    v = sub.add_parser("validate", help="check a config and print it with defaults filled in")
    v.add_argument("config")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "validate":
            print(json.dumps(load_config(args.config), indent=2, sort_keys=True))
        elif args.command == "run":
            if args.jobs < 1:
                raise ConfigError("--jobs: must be >= 1")
            dest = run_experiment(args.config, out=args.out, seed=args.seed, jobs=args.jobs)
            print(f"wrote {dest}")
        else:
            dest = run_mask_study(args.config, out=args.out, seed=args.seed)
            print(f"wrote {dest / 'mask_study.csv'}")
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
