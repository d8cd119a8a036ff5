"""Command-line entry point.

    skiprnn run --config PATH [--set k=v ...] [--seeds a,b,c] [--out DIR]
    skiprnn table --config-dir DIR --runs N [--out DIR] [--workers K]
    skiprnn check-data --mnist DIR

Exit codes: 0 success, 1 invalid config, 2 data error, 3 numeric divergence.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

from ._alloc import tune_allocator
from .errors import ConfigurationError, DataError, SkipRNNError
from .harness import (
    DATA_ENV,
    ExperimentConfig,
    emit,
    load_config_dir,
    parse_overrides,
    run_experiment,
    run_table,
    table_csv,
)
from .tasks import read_mnist_dir

log = logging.getLogger("skiprnn")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


def _seeds(text):
    if not text:
        return None
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigurationError(f"bad --seeds {text!r}") from exc


def cmd_run(args) -> int:
    overrides = parse_overrides(args.set)
    base = ExperimentConfig.from_file(args.config, overrides)
    seeds = _seeds(args.seeds) or [base.seed]
    out_root = args.out or os.path.join("runs", base.name or base.config_hash())
    status = EXIT_OK
    for seed in seeds:
        cfg = dataclasses.replace(base, seed=seed)

        def progress(step, name, value, frac):
            log.info("seed %d step %d %s=%.6g update_frac=%.3f", seed, step, name, value, frac)

        rec = run_experiment(cfg, progress=progress if args.verbose else None)
        out = out_root if len(seeds) == 1 else os.path.join(out_root, f"seed{seed}")
        for path in emit(rec, out, args.formats.split(",")):
            log.info("wrote %s", path)
        print(
            f"{cfg.name or rec.config_hash} seed={seed} status={rec.status} {rec.metric_name}={rec.metric:.6g} "
            f"solved={rec.solved} updates={rec.updates_mean:.2f}/{rec.steps_per_sequence} flops={rec.flops:.3g}"
        )
        if rec.status != "ok":
            status = EXIT_NUMERIC
    return status


def cmd_table(args) -> int:
    configs = load_config_dir(args.config_dir)
    rows = run_table(configs, args.runs, seeds=_seeds(args.seeds), workers=args.workers, out_dir=args.out)
    text = table_csv(rows)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "table.csv"), "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
    sys.stdout.write(text)
    return EXIT_NUMERIC if any(r["incomplete"] for r in rows) else EXIT_OK


def cmd_check_data(args) -> int:
    path = args.mnist or os.environ.get(DATA_ENV, "")
    if not path:
        raise DataError(f"no MNIST directory given (use --mnist or ${DATA_ENV})")
    arrays, digests = read_mnist_dir(path)
    for name, digest in sorted(digests.items()):
        print(f"{name}  sha256={digest}")
    print(f"train={len(arrays['train_labels'])} test={len(arrays['test_labels'])}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="skiprnn", description="Skip RNN experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train and evaluate one config")
    run.add_argument("--config", required=True)
    run.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    run.add_argument("--seeds")
    run.add_argument("--out")
    run.add_argument("--formats", default="json,csv")
    run.set_defaults(func=cmd_run)

    table = sub.add_parser("table", help="run every *.cfg in a directory over a seed grid")
    table.add_argument("--config-dir", required=True)
    table.add_argument("--runs", type=int, default=4)
    table.add_argument("--seeds")
    table.add_argument("--workers", type=int, default=1)
    table.add_argument("--out")
    table.set_defaults(func=cmd_table)

    check = sub.add_parser("check-data", help="validate MNIST IDX files")
    check.add_argument("--mnist")
    check.set_defaults(func=cmd_check_data)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(message)s",
    )
    tune_allocator()
    try:
        return args.func(args)
    except SkipRNNError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
