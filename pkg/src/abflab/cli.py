"""Command line entry points: oracle, run, compare, rates."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

from .harness import (CompareError, ConfigError, ExperimentConfig, compare_runs,
                      load_config, run, write_rates_script)


def _add_common(parser):
    parser.add_argument("--config", help="path to a key=value config file")
    parser.add_argument("--out", help="output directory (default: fresh timestamped dir)")
    parser.add_argument("--seed", type=int, help="random seed for particle runs")
    parser.add_argument("--threads", type=int, help="worker count; never affects results")
    parser.add_argument("--overwrite", action="store_true",
                        help="allow writing into an existing output directory")


def _build_config(args, force_kind=None):
    config = load_config(args.config) if args.config else ExperimentConfig()
    updates = {}
    if force_kind:
        updates["kind"] = force_kind
    if args.out:
        updates["out"] = args.out
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.threads is not None:
        updates["threads"] = args.threads
    if args.overwrite:
        updates["overwrite"] = True
    return replace(config, **updates)


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="abflab",
        description="Adaptive-biasing-force laboratory: reference profiles, "
                    "density and particle runs, diagnostics.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_oracle = sub.add_parser("oracle", help="tabulate the reference free-energy profile")
    _add_common(p_oracle)

    p_run = sub.add_parser("run", help="execute the experiment described by a config")
    _add_common(p_run)

    p_cmp = sub.add_parser("compare", help="diff the summaries of two runs")
    p_cmp.add_argument("dir_a")
    p_cmp.add_argument("dir_b")
    p_cmp.add_argument("--tol", action="append", default=[],
                       metavar="KEY=VALUE", help="per-metric tolerance (or default=VALUE)")

    p_rates = sub.add_parser("rates", help="emit a gnuplot script for a run's diagnostics")
    p_rates.add_argument("run_dir")

    args = parser.parse_args(argv)

    try:
        if args.command == "oracle":
            code, summary, out_dir = run(_build_config(args, force_kind="oracle_only"))
            print(f"profile written to {out_dir}")
            return code
        if args.command == "run":
            code, summary, out_dir = run(_build_config(args))
            print(f"run {summary['kind']} finished in {out_dir} (exit {code})")
            for name, mon in summary.get("monitors", {}).items():
                status = "PASS" if mon.get("pass") else "FAIL"
                print(f"  monitor {name}: {status}")
            return code
        if args.command == "compare":
            tols = {}
            for item in args.tol:
                key, _, value = item.partition("=")
                tols[key] = float(value)
            report, code = compare_runs(args.dir_a, args.dir_b, tols)
            print(json.dumps(report, indent=2, sort_keys=True))
            return code
        if args.command == "rates":
            path = write_rates_script(args.run_dir)
            print(f"wrote {path}")
            return 0
    except (ConfigError, CompareError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
