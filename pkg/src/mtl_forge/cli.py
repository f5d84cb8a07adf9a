"""Command-line front end: ``prepare``, ``train``, ``evaluate``, ``report``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .autodiff import NumericError
from .config import ExperimentConfig, load_config, with_overrides
from .data import DataError
from . import experiment
from .report import build_report, load_report, read_rmse_table, render_summary, write_report

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SEED_ENV = "MTL_FORGE_SEED"

log = logging.getLogger("mtl_forge")


class UsageError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI experiment config")
    common.add_argument("--seed", type=int, help=f"random seed (falls back to ${SEED_ENV})")
    common.add_argument("--models", help="comma-separated subset of the seven models")
    common.add_argument("--workers", type=int, help="parallel training jobs (0 = all CPUs)")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mtl-forge", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", parents=[common], help="run the data pipeline and cache datasets")
    sub.add_parser("train", parents=[common], help="train every configured model")
    ev = sub.add_parser("evaluate", parents=[common], help="score checkpoints on the test split")
    ev.add_argument("--table", type=Path,
                    help="score an existing per-task RMSE CSV instead of checkpoints")
    sub.add_parser("report", parents=[common], help="print the asterisked RMSE summary")
    return p


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    seed = args.seed
    if seed is None and os.environ.get(SEED_ENV):
        try:
            seed = int(os.environ[SEED_ENV])
        except ValueError:
            raise UsageError(f"${SEED_ENV} is not an integer") from None
    models = None
    if args.models:
        models = tuple(m.strip().lower() for m in args.models.split(",") if m.strip())
    return with_overrides(cfg, seed=seed, models=models, workers=args.workers, out=args.out)


def cmd_prepare(cfg: ExperimentConfig) -> int:
    datasets = experiment.prepare(cfg)
    for d in datasets:
        print(f"{d.name}: {len(d)} rows (train {d.train_idx.size}, "
              f"val {d.val_idx.size}, test {d.test_idx.size})")
    print((Path(cfg.out) / "pearson.csv").read_text(), end="")
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig) -> int:
    status = experiment.train_all(cfg)
    failed = {k: v for k, v in status.items() if v is not None}
    for name in status:
        print(f"{name}: {'FAILED ' + failed[name] if name in failed else 'ok'}")
    if not failed:
        return EXIT_OK
    if any(msg.startswith("NumericError") for msg in failed.values()):
        return EXIT_NUMERIC
    return EXIT_DATA


def cmd_evaluate(cfg: ExperimentConfig, table: Path | None) -> int:
    if table is not None:
        tasks, rmse = read_rmse_table(table)
        rep = build_report(tasks, rmse)
        write_report(rep, cfg.out)
    else:
        rep = experiment.evaluate(cfg)
    print(render_summary(rep), end="")
    return EXIT_OK


def cmd_report(cfg: ExperimentConfig) -> int:
    rep = load_report(cfg.out)
    text = render_summary(rep)
    (Path(cfg.out) / "summary.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "prepare":
            return cmd_prepare(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.table)
        return cmd_report(cfg)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except KeyboardInterrupt:
        print("interrupted; files ending in .partial are incomplete", file=sys.stderr)
        return 130
    except (UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
