"""Command-line entry point: ``selnet train|sweep|gradcheck|report``.

Exit codes: 0 success, 1 invalid config or input, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .data import DataError
from .evaluation import RiskCoverageRow, write_report_csv
from .experiment import (
    ConfigError,
    ExperimentConfig,
    TrainingError,
    load_config,
    load_records,
    report_from_records,
    run_sweep,
    run_train,
)

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("selnet")


def _apply_overrides(cfg: ExperimentConfig, args: argparse.Namespace, sweep: bool) -> ExperimentConfig:
    changes = {}
    if args.seed is not None:
        changes["seeds"] = [args.seed]
    if args.out is not None:
        changes["out"] = args.out
    if args.mode is not None:
        changes["selection_mode"] = args.mode
        changes["selection_modes"] = None
    if args.coverage is not None:
        changes["coverages" if sweep else "target_coverage"] = [args.coverage] if sweep else args.coverage
    if args.combine_train_val is not None:
        changes["combine_train_val"] = args.combine_train_val
    if args.data is not None:
        changes["data_path"] = args.data
    if args.epochs is not None:
        changes["epochs"] = args.epochs
    if not changes:
        return cfg
    # round-trip so the snapshot in each record matches what was run
    merged = cfg.replace(**changes)
    return ExperimentConfig.from_dict(merged.to_dict())


def _print_rows(rows: list[RiskCoverageRow]) -> None:
    print(f"{'method':<8} {'dataset':<11} {'cov':>4} {'metric':<6} {'mean':>10} {'std':>9} {'n':>3}")
    for r in rows:
        print(f"{r.method:<8} {r.dataset:<11} {r.coverage:>4} {r.metric:<6} {r.mean:>10.4f} {r.std:>9.4f} {r.trials:>3}")


def _render(rows: list[RiskCoverageRow], out: Path, plots: bool) -> None:
    if not plots or not rows:
        return
    from .plotting import plot_risk_coverage, plot_training

    plot_risk_coverage(rows, out / "risk_coverage.png")
    plot_training([rec for _, rec in load_records(out)], out / "training.png")


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _apply_overrides(load_config(args.config), args, sweep=False)
    rows = run_train(cfg, jobs=args.jobs)
    _print_rows(rows)
    _render(rows, Path(cfg.out), args.plots)
    print(f"wrote {Path(cfg.out) / 'report.csv'}")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _apply_overrides(load_config(args.config), args, sweep=True)
    rows = run_sweep(cfg, jobs=args.jobs)
    _print_rows(rows)
    _render(rows, Path(cfg.out), args.plots)
    print(f"wrote {Path(cfg.out) / 'report.csv'}")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    from .gradcheck import run_gradcheck

    results = run_gradcheck(seed=args.seed or 0)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return EXIT_RUNTIME
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise ConfigError(f"run-dir: not a directory: {run_dir}")
    rows = report_from_records(run_dir)
    if not rows:
        raise ConfigError(f"run-dir: no record.json files under {run_dir}")
    out = Path(args.out) if args.out else run_dir
    write_report_csv(rows, out / "report.csv")
    _print_rows(rows)
    if args.plots:
        from .plotting import plot_risk_coverage, plot_training

        plot_risk_coverage(rows, out / "risk_coverage.png")
        plot_training([rec for _, rec in load_records(run_dir)], out / "training.png")
    print(f"wrote {out / 'report.csv'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="selnet", description="Train and evaluate selective networks.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def run_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("config", help="config JSON path or preset name (e.g. ccs-gumbel)")
        p.add_argument("--seed", type=int, help="run this single seed instead of the config's list")
        p.add_argument("--out", help="output directory")
        p.add_argument("--mode", choices=("gumbel", "soft"))
        p.add_argument("--coverage", type=float, help="target coverage (train) or the only coverage (sweep)")
        p.add_argument("--combine-train-val", action=argparse.BooleanOptionalAction, default=None)
        p.add_argument("--data", help="dataset CSV path")
        p.add_argument("--epochs", type=int)
        p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
        p.add_argument("--no-plots", dest="plots", action="store_false")

    p = sub.add_parser("train", help="train at the config's target coverage")
    run_flags(p)
    p.set_defaults(func=cmd_train)
    p = sub.add_parser("sweep", help="one model per (coverage, seed, mode) and a coverage table report")
    run_flags(p)
    p.set_defaults(func=cmd_sweep)
    p = sub.add_parser("gradcheck", help="finite-difference and sampler verification suite")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    p = sub.add_parser("report", help="rebuild report.csv and figures from a run directory")
    p.add_argument("run_dir")
    p.add_argument("--out")
    p.add_argument("--no-plots", dest="plots", action="store_false")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DataError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (TrainingError, FloatingPointError, RuntimeError, ValueError) as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
