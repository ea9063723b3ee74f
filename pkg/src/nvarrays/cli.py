"""``nvarrays`` command line: one subcommand per experiment, plus ``report``."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

from .config import EXPERIMENTS, ConfigError, load_config
from .pipeline import StageError, run
from .report import build_report, write_report


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nvarrays", description="Colour-centre array simulation pipelines.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", type=Path, help="YAML config file")
        p.add_argument("--seed", type=int, help="master seed (overrides master_seed)")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--parallelism", type=int, help="worker processes (overrides parallelism)")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="set a nested config key, e.g. material.nitrogen_ppb=5")
        p.add_argument("--report", action=argparse.BooleanOptionalAction, default=None,
                       help="write the text/CSV report (default: only for full-pipeline)")
    p = sub.add_parser("report", help="rebuild the report from a run directory")
    p.add_argument("--out", required=True, help="run directory")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "report":
        out = Path(args.out)
        if not out.is_dir():
            print(f"error: output_dir: {out} is not a directory", file=sys.stderr)
            return 2
        report = build_report(out)
        write_report(report, out)
        print(report.to_text())
        return 0

    try:
        cfg = load_config(args.config, args.override, experiment=args.command, master_seed=args.seed,
                          output_dir=args.out, parallelism=args.parallelism)
    except ConfigError as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return 2
    try:
        manifest = run(cfg, with_report=args.report)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for stage in manifest.stages:
        print(f"{stage['stage']:<12} {stage['wall_time_s']:8.2f} s")
    print(f"{len(manifest.outputs)} files written to {cfg.output_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
