"""Train the long-running acceptance configurations and cache their records.

Runs are sequential (one CPU) and resumable: a run whose ``result.json``
already exists is skipped.  Output layout::

    acceptance_runs/<key>/seed<k>/result.json      ResultRecord
    acceptance_runs/<key>/seed<k>/summary.csv ...  the usual CSV exports
    acceptance_runs/<key>/seed<k>/masks.npz        test-set usage masks (MNIST)

    python3 scripts/run_acceptance.py                  # everything
    python3 scripts/run_acceptance.py --only adding_   # keys starting with a prefix
    python3 scripts/run_acceptance.py --list
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import time

import numpy as np

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
RUN_DIR = os.path.join(ROOT, "acceptance_runs")
CONFIG_DIR = os.path.join(ROOT, "configs")
MNIST_DIR = os.path.join(ROOT, "data", "mnist")

MNIST_DESK = dict(mnist_val_size=500, mnist_desk_size=2000, epochs=100)


@dataclasses.dataclass(frozen=True)
class Planned:
    key: str
    config: str  # path relative to configs/
    overrides: dict
    seeds: tuple = (0, 1)
    save_masks: bool = False


# Synthetic runs use the default training budgets (adding 60k batches, freqdisc 30k).
PLAN = [
    # cheap runs first so every criterion has evidence early
    # dense baselines and the random-skip control only need the solved flag
    Planned("adding_lstm", "adding/lstm.cfg", {}),
    Planned("adding_gru", "adding/gru.cfg", {}),
    Planned("mnist_gru", "mnist/gru.cfg", MNIST_DESK, seeds=(0,), save_masks=True),
    Planned("mnist_skip_gru_lam1e-4", "mnist/skip_gru_lam1e-4.cfg", MNIST_DESK, seeds=(0,), save_masks=True),
    # learned gates keep shedding updates long after the task is solved, so no early exit
    Planned("freqdisc_skip_lstm_lam1e-4_ts1", "freqdisc/skip_lstm_lam1e-4_ts1.cfg", {"early_exit": False}),
    Planned("adding_skip_lstm_lam1e-5", "adding/skip_lstm_lam1e-5.cfg", {"early_exit": False}),
    Planned("adding_lstm_pskip0.5", "adding/lstm_pskip0.5.cfg", {}),
    # twice the sequence length, so one seed only
    Planned("freqdisc_skip_lstm_lam1e-4_ts0.5", "freqdisc/skip_lstm_lam1e-4_ts0.5.cfg", {"early_exit": False}, seeds=(0,)),
]


def run_dir(key: str, seed: int) -> str:
    return os.path.join(RUN_DIR, key, f"seed{seed}")


def load_masks(key: str, seed: int) -> np.ndarray:
    with np.load(os.path.join(run_dir(key, seed), "masks.npz")) as z:
        return np.unpackbits(z["packed"], axis=1, count=int(z["steps"])).astype(bool)


def execute(item: Planned, seed: int, log=logging.getLogger("acceptance")):
    from skiprnn.harness import ExperimentConfig, emit, run_experiment

    overrides = {**item.overrides, "seed": seed}
    if item.config.startswith("mnist/"):
        overrides.setdefault("mnist_dir", MNIST_DIR)
    cfg = ExperimentConfig.from_file(os.path.join(CONFIG_DIR, item.config), overrides)

    def progress(step, name, value, frac):
        log.info("%s seed %d step %d %s=%.6g update_frac=%.3f", item.key, seed, step, name, value, frac)

    start = time.time()
    rec, _, metrics = run_experiment(cfg, progress=progress, return_state=True)
    out = run_dir(item.key, seed)
    if item.save_masks and metrics.usage_masks is not None:
        os.makedirs(out, exist_ok=True)
        masks = metrics.usage_masks
        np.savez_compressed(os.path.join(out, "masks.npz"), packed=np.packbits(masks, axis=1), steps=masks.shape[1])
    emit(rec, out)  # result.json marks the run as done, so masks are written first
    log.info(
        "%s seed %d done in %.0fs: %s=%.6g solved=%s update_frac=%.3f",
        item.key, seed, time.time() - start, rec.metric_name, rec.metric, rec.solved, rec.update_frac_mean,
    )
    return rec


def main(argv=None):
    ap = argparse.ArgumentParser(description="train and cache acceptance runs")
    ap.add_argument("--only", default="", help="key prefix filter")
    ap.add_argument("--list", action="store_true")
    ap.add_argument("--force", action="store_true", help="rerun even if a record exists")
    args = ap.parse_args(argv)

    from skiprnn._alloc import tune_allocator

    tune_allocator()
    os.makedirs(RUN_DIR, exist_ok=True)
    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s %(message)s",
        handlers=[logging.StreamHandler(sys.stderr), logging.FileHandler(os.path.join(RUN_DIR, "run.log"))],
    )
    todo = [(item, s) for item in PLAN if item.key.startswith(args.only) for s in item.seeds]
    # first seeds of every config before second seeds, so partial progress covers every criterion
    todo.sort(key=lambda pair: pair[1])
    for item, seed in todo:
        done = os.path.exists(os.path.join(run_dir(item.key, seed), "result.json"))
        if args.list:
            print(f"{'done' if done else 'todo'}  {item.key} seed {seed}")
            continue
        if done and not args.force:
            continue
        execute(item, seed)


if __name__ == "__main__":
    main()
