"""FLOP accounting, update statistics, and run aggregation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cells import GATES_PER_CELL
from .errors import ConfigurationError
from .tasks import mnist_pixel


@dataclass(frozen=True)
class FlopModel:
    """Multiply-accumulates of the recurrent affine maps, one MAC = one FLOP.

    Biases, nonlinearities and the output head are not counted.  Skip cells
    add one MAC per unit read by the update gate for every executed update.
    """

    cell: str
    input_size: int
    hidden_sizes: tuple[int, ...]
    gate_width: int = 0

    def __post_init__(self):
        if self.cell not in GATES_PER_CELL:
            raise ConfigurationError(f"unknown cell {self.cell!r}")

    @classmethod
    def from_params(cls, params) -> "FlopModel":
        gate = int(params.gate_mask().sum()) if params.skip else 0
        return cls(params.cell, params.input_size, tuple(params.hidden_sizes), gate)

    @property
    def macs_per_update(self) -> int:
        gates = GATES_PER_CELL[self.cell]
        total, n_in = 0, self.input_size
        for h in self.hidden_sizes:
            total += gates * (n_in + h) * h
            n_in = h
        return total + self.gate_width


def flops_per_sequence(model: FlopModel, updates, steps: int):
    """Inference FLOPs for ``updates`` executed steps out of ``steps``.

    ``updates`` may be a mean over sequences, in which case the result is
    fractional.
    """
    if updates < 0 or updates > steps:
        raise ConfigurationError(f"updates {updates} outside [0, {steps}]")
    return updates * model.macs_per_update


def round_sig(x: float, digits: int = 3) -> float:
    if x == 0:
        return 0.0
    return float(f"{x:.{digits - 1}e}")


@dataclass
class RunMetrics:
    """Outcome of one training run."""

    curves: list = field(default_factory=list)  # dicts: step, split, metric, value
    metric_name: str = ""
    metric: float = float("nan")
    solved: bool = False
    usage_masks: np.ndarray | None = None  # (N, T) bool over the final eval set
    flops: float = 0.0

    @property
    def steps(self) -> int:
        return int(self.usage_masks.shape[1])

    @property
    def updates_per_sequence(self) -> np.ndarray:
        return self.usage_masks.sum(axis=1)

    @property
    def update_frac_mean(self) -> float:
        return float(self.usage_masks.mean())

    @property
    def update_frac_std(self) -> float:
        """Spread across sequences (per-sequence std), not across runs."""
        return float((self.usage_masks.mean(axis=1)).std())

    @property
    def updates_mean(self) -> float:
        return float(self.updates_per_sequence.mean())

    @property
    def updates_std(self) -> float:
        return float(self.updates_per_sequence.std())

    def summary(self) -> dict:
        return {
            "metric": self.metric,
            "solved": float(self.solved),
            "update_frac": self.update_frac_mean,
            "updates": self.updates_mean,
            "flops": float(self.flops),
        }


def aggregate_runs(runs) -> dict:
    """Mean and population std of every summary field, keys sorted.

    Accepts :class:`RunMetrics` or plain ``{field: value}`` dicts.
    """
    runs = list(runs)
    if not runs:
        raise ConfigurationError("aggregate_runs needs at least one run")
    rows = [r.summary() if isinstance(r, RunMetrics) else dict(r) for r in runs]
    keys = sorted(set().union(*rows))
    out = {}
    for k in keys:
        vals = np.array([row[k] for row in rows if k in row], dtype=np.float64)
        out[k] = {"mean": float(vals.mean()), "std": float(vals.std()), "n": int(len(vals))}
    return out


def usage_mask_export(masks, inputs, task: str = "generic", max_examples: int | None = None) -> list[dict]:
    """Flatten usage masks into per-step records for plotting.

    ``inputs`` is ``(N, T, F)``; each record carries the example index, the
    step, the used flag and the ``F`` input values.  MNIST records also get
    the pixel ``row`` and ``col``.
    """
    masks = np.asarray(masks, dtype=bool)
    inputs = np.asarray(inputs, dtype=np.float64)
    if masks.ndim == 1:
        masks = masks[None]
    if inputs.ndim == 2:
        inputs = inputs[None]
    if masks.shape != inputs.shape[:2]:
        raise ConfigurationError(f"mask shape {masks.shape} does not match inputs {inputs.shape}")
    n = masks.shape[0] if max_examples is None else min(max_examples, masks.shape[0])
    records = []
    for e in range(n):
        for t in range(masks.shape[1]):
            rec = {"example": e, "step": t, "used": bool(masks[e, t])}
            for j in range(inputs.shape[2]):
                rec[f"x{j}"] = float(inputs[e, t, j])
            if task == "mnist":
                rec["row"], rec["col"] = mnist_pixel(t)
            records.append(rec)
    return records


def mean_std(values) -> tuple[float, float]:
    vals = np.asarray(list(values), dtype=np.float64)
    if vals.size == 0:
        return math.nan, math.nan
    return float(vals.mean()), float(vals.std())
