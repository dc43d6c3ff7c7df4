"""Command-line front end: run one scenario, sweep an axis, or ablate.

Exit codes: 0 on success, 2 for configuration problems (including bad
flags), 3 for runtime failures.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .comm import display_units
from .config import (VARIANTS, ConfigError, default_config, load_config,
                     override)
from .runner import SWEEP_AXES, run_ablation, run_scenario, run_sweep


def _parse_values(text: str) -> list[float]:
    try:
        return [float(tok) for tok in text.split(",") if tok.strip() != ""]
    except ValueError as err:
        raise ConfigError(f"--values must be comma-separated numbers: {err}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bevcomm",
        description="Radar-camera collaborative perception simulator: "
                    "run scenarios, robustness sweeps, and ablations.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, metavar="PATH",
                        help="YAML configuration file (defaults used if omitted)")
    common.add_argument("--seed", type=int, metavar="N",
                        help="world seed, overrides the config")
    common.add_argument("--out", type=Path, metavar="DIR",
                        help="write report, tables, and figures here")
    common.add_argument("--threads", type=int, metavar="N",
                        help="worker threads for the per-ego stage "
                             "(results are identical for any count)")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", parents=[common],
                         help="simulate one scenario and report metrics")
    run.add_argument("--variant", choices=VARIANTS,
                     help="pipeline variant, overrides the config")

    sweep = sub.add_parser("sweep", parents=[common],
                           help="sweep one channel axis over paired seeds")
    sweep.add_argument("--axis", choices=SWEEP_AXES, required=True)
    sweep.add_argument("--values", metavar="LIST",
                       help="comma-separated sweep values "
                            "(defaults to the config's list)")
    sweep.add_argument("--seeds", type=int, metavar="N",
                       help="seeds per value (defaults to the config)")

    ablate = sub.add_parser("ablate", parents=[common],
                            help="compare pipeline variants on shared seeds")
    ablate.add_argument("--variants", metavar="LIST",
                        help="comma-separated variant names (default: all)")
    ablate.add_argument("--seeds", type=int, metavar="N")
    return parser


def _load(args: argparse.Namespace):
    cfg = load_config(args.config) if args.config else default_config()
    assignments: dict[str, object] = {}
    if args.seed is not None:
        assignments["seed"] = args.seed
    if getattr(args, "variant", None) is not None:
        assignments["pipeline.variant"] = args.variant
    if assignments:
        cfg = override(cfg, assignments)
    out_dir = args.out if args.out is not None else cfg.output.dir
    return cfg, out_dir


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg, out_dir = _load(args)
        figures = out_dir is not None
        if args.command == "run":
            outcome = run_scenario(cfg, threads=args.threads, out_dir=out_dir,
                                   figures=figures)
            acc05, acc07 = outcome.mean_acc
            print(f"variant={cfg.pipeline.variant} seed={cfg.seed} "
                  f"acc@0.5={acc05:.3f} acc@0.7={acc07:.3f} "
                  f"comm={display_units(outcome.ledger.units)} units")
        elif args.command == "sweep":
            values = _parse_values(args.values) if args.values else None
            outcome = run_sweep(cfg, args.axis, values, num_seeds=args.seeds,
                                threads=args.threads, out_dir=out_dir,
                                figures=figures)
            for row in outcome.rows:
                print(f"{args.axis}={row[args.axis]} "
                      f"acc@0.7={float(row['acc_0.7']):.3f}")
        else:
            variants = [v.strip() for v in args.variants.split(",")] \
                if args.variants else None
            outcome = run_ablation(cfg, variants, num_seeds=args.seeds,
                                   threads=args.threads, out_dir=out_dir,
                                   figures=figures)
            for variant, acc in outcome.mean_acc_07().items():
                print(f"{variant}: acc@0.7={acc:.3f}")
        if out_dir is not None:
            print(f"artifacts written to {out_dir}")
        return 0
    except ConfigError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001 - boundary maps errors to exit 3
        print(f"runtime error: {err}", file=sys.stderr)
        return 3


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
