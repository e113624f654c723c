"""Command-line entry point: ``kolmokernel <command> <config|run-dir>``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .experiment import (EXIT_CONFIG, EXIT_OK, STAGE_SETS, ConfigError, ExperimentConfig,
                         emit_plots, run_experiment)

log = logging.getLogger("kolmokernel")


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="kolmokernel", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in STAGE_SETS:
        p = sub.add_parser(name, help=f"stages: {', '.join(STAGE_SETS[name])}")
        p.add_argument("config", type=Path)
        p.add_argument("--seed", type=int, default=None, help="sampling seed (overrides the config)")
        p.add_argument("--out", type=Path, default=None, help="output directory")
        p.add_argument("--refine", type=int, default=2, help="grid refinement factor for stability fits")
    p = sub.add_parser("emit-plots", help="write plot-ready CSV files from a run directory")
    p.add_argument("run_dir", type=Path)
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "emit-plots":
        try:
            manifest = emit_plots(args.run_dir)
        except FileNotFoundError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        if not manifest["emitted"]:
            log.warning("no plot data found in %s", args.run_dir)
        print(json.dumps(manifest, indent=2))
        return EXIT_OK
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    if args.refine < 1:
        print("error: --refine must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = ExperimentConfig.load(args.config)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    report = run_experiment(cfg, args.out, STAGE_SETS[args.command], args.refine, args.seed)
    for name, stage in report.stages.items():
        line = f"{name:<14} {stage.status}"
        print(line + (f"  ({stage.message})" if stage.message else ""))
    for w in report.warnings:
        print(f"warning: {w}")
    return report.exit_code


if __name__ == "__main__":
    sys.exit(main())
