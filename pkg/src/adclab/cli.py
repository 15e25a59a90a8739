"""Command-line entry point: ``adclab run | sweep | check``."""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

from .config import METHODS, ExperimentConfig, load_config
from .errors import AdcLabError
from .runner import SWEEP_AXES, run_experiment, sweep

DEFAULT_NME_EXEMPLARS = 20


def _build_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    changes = {}
    if args.method:
        changes["method"] = args.method
        if args.method != "nme":
            changes["exemplars"] = None
        elif cfg.exemplars is None:
            changes["exemplars"] = DEFAULT_NME_EXEMPLARS
    if getattr(args, "exemplars", None) is not None:
        changes["exemplars"] = args.exemplars
    if args.seed is not None:
        changes["seeds"] = tuple(args.seed)
    if args.out:
        changes["out_dir"] = args.out
    if args.workers:
        changes["workers"] = args.workers
    if args.oracle:
        changes["oracle_eval"] = True
    return cfg.replace(**changes) if changes else cfg


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.4f}"


def cmd_run(args) -> int:
    cfg = _build_config(args)
    reports = run_experiment(cfg)
    print("method    seed   a_last  a_inc   backward_passes")
    for r in reports:
        print(f"{r.method:<9} {r.seed:<6} {_fmt(r.a_last)}  {_fmt(r.a_inc)}  {r.backward_passes}")
    failed = len(cfg.seeds) - len(reports)
    if failed:
        print(f"{failed} seed(s) failed; see errors_{cfg.method}.csv", file=sys.stderr)
    return 1 if not reports else 0


def cmd_sweep(args) -> int:
    cfg = _build_config(args)
    if args.method is None and cfg.method != "adc":
        cfg = cfg.replace(method="adc", exemplars=None)
    values = [float(v) for v in args.values.replace(",", " ").split()]
    rows = sweep(cfg, args.axis, values)
    print(f"{args.axis:<10} runs  a_last  a_inc   backward_passes")
    for r in rows:
        print(f"{r.value:<10g} {r.n_runs:<5} {_fmt(r.a_last)}  {_fmt(r.a_inc)}  {r.backward_passes:g}")
    return 0


def cmd_check(args) -> int:
    from .checks import run_self_checks

    results = run_self_checks(quick=args.quick)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}  {r.detail}")
    return 0 if all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adclab", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def experiment_flags(p):
        p.add_argument("--config", type=Path, help="INI experiment file")
        p.add_argument("--seed", type=int, action="append",
                       help="override seeds (repeatable)")
        p.add_argument("--method", choices=METHODS)
        p.add_argument("--out", help="output directory for CSV reports")
        p.add_argument("--workers", type=int, help="parallel seed workers")
        p.add_argument("--exemplars", type=int, help="nme budget per class (0 = all)")
        p.add_argument("--oracle", action="store_true", help="enable oracle drift evaluation")

    run = sub.add_parser("run", help="run an experiment over all seeds")
    experiment_flags(run)
    run.set_defaults(func=cmd_run)

    sw = sub.add_parser("sweep", help="ablation over one adc hyperparameter")
    experiment_flags(sw)
    sw.add_argument("--axis", choices=SWEEP_AXES, required=True)
    sw.add_argument("--values", required=True, help="comma-separated values")
    sw.set_defaults(func=cmd_sweep)

    chk = sub.add_parser("check", help="gradient and oracle self-tests")
    chk.add_argument("--quick", action="store_true", help="fewer gradient draws")
    chk.set_defaults(func=cmd_check)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (AdcLabError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
