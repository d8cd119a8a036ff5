"""Experiment runner: configs, training loops, result records and emitters."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .autodiff import Tape, spawn_rngs
from .cells import SkipPolicy, bind, fast_forward, init_params, rollout
from .errors import ConfigurationError, DataError, NumericError, SkipRNNError
from .metrics import FlopModel, RunMetrics, aggregate_runs, flops_per_sequence, usage_mask_export
from .objectives import Adam, BudgetSpec, budget_loss, init_readout, readout, task_loss
from .tasks import (
    adding_solved,
    freqdisc_length,
    freqdisc_solved,
    gen_adding,
    gen_freqdisc,
    load_mnist,
)

log = logging.getLogger(__name__)

DATA_ENV = "SKIPRNN_DATA"
DEFAULT_STEPS = {"adding": 60_000, "freqdisc": 30_000}
DEFAULT_EPOCHS = {"full": 600, "desk": 100}
EVAL_CHUNK = 1000


@dataclass
class ExperimentConfig:
    """One run.  Defaults follow the reference protocol (Adam 1e-4, clip 1, batch 256)."""

    name: str = ""
    task: str = "adding"  # adding | freqdisc | mnist
    cell: str = "lstm"  # lstm | gru
    policy: str = "learned"  # learned | random | dense
    lam: float = 0.0
    budget: str = "cost_per_sample"  # cost_per_sample | l1_target | l2_target | none
    budget_target: float = 0.0
    p_skip: float = 0.0
    binarizer: str = "deterministic"
    hidden: int = 110
    layers: int = 1
    gate_layers: str = ""  # comma-separated layer indices; empty = last layer
    sampling_period: float = 1.0
    length: int = 50
    batch_size: int = 256
    max_steps: int = 0  # training batches for synthetic tasks; 0 = task default
    epochs: int = 0  # MNIST epochs; 0 = profile default
    eval_every: int = 250
    eval_size: int = 10_000
    early_exit: bool = True
    patience: int = 5
    seed: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: float = 1.0
    mnist_dir: str = ""
    mnist_profile: str = "desk"
    mnist_val_size: int = 5000
    mnist_desk_size: int = 2000
    usage_examples: int = 16

    def validate(self) -> "ExperimentConfig":
        if self.task not in ("adding", "freqdisc", "mnist"):
            raise ConfigurationError(f"unknown task {self.task!r}")
        if self.cell not in ("lstm", "gru"):
            raise ConfigurationError(f"unknown cell {self.cell!r}")
        if self.policy not in ("learned", "random", "dense"):
            raise ConfigurationError(f"unknown policy {self.policy!r}")
        if self.policy != "learned" and self.lam != 0.0:
            raise ConfigurationError("lam only applies to the learned policy")
        if self.policy != "random" and self.p_skip != 0.0:
            raise ConfigurationError("p_skip only applies to the random policy")
        self.skip_policy()
        self.budget_spec()
        if self.hidden <= 0 or self.layers <= 0 or self.batch_size <= 0:
            raise ConfigurationError("hidden, layers and batch_size must be positive")
        if self.eval_every <= 0 or self.eval_size <= 0 or self.patience <= 0:
            raise ConfigurationError("eval_every, eval_size and patience must be positive")
        if self.task == "freqdisc":
            freqdisc_length(self.sampling_period)
            if self.sampling_period not in (0.5, 1.0):
                raise ConfigurationError("sampling_period must be 0.5 or 1.0 ms")
            if self.batch_size % 2:
                raise ConfigurationError("freqdisc batches must be even (stratified)")
        if self.mnist_profile not in ("full", "desk"):
            raise ConfigurationError(f"unknown mnist_profile {self.mnist_profile!r}")
        for i in self.gate_layer_indices():
            if not 0 <= i < self.layers:
                raise ConfigurationError(f"gate layer {i} out of range")
        return self

    def skip_policy(self) -> SkipPolicy:
        kind = {"learned": "learned", "random": "random", "dense": "always_update"}[self.policy]
        return SkipPolicy(kind, self.p_skip, self.binarizer)

    def budget_spec(self) -> BudgetSpec:
        if self.policy != "learned" or self.budget == "none":
            return BudgetSpec()
        return BudgetSpec(self.budget, self.lam, self.budget_target)

    def gate_layer_indices(self) -> tuple[int, ...]:
        if not self.gate_layers.strip():
            return (self.layers - 1,)
        return tuple(int(s) for s in self.gate_layers.split(","))

    @property
    def train_steps(self) -> int:
        return self.max_steps or DEFAULT_STEPS.get(self.task, 0)

    @property
    def train_epochs(self) -> int:
        return self.epochs or DEFAULT_EPOCHS[self.mnist_profile]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        """Stable digest of the run-defining fields (``name`` excluded)."""
        d = self.to_dict()
        d.pop("name")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    # -- text config files ------------------------------------------------

    @classmethod
    def from_pairs(cls, pairs: dict) -> "ExperimentConfig":
        cfg = cls()
        return cfg.with_overrides(pairs)

    def with_overrides(self, pairs: dict) -> "ExperimentConfig":
        types = {f.name: f.type for f in dataclasses.fields(self)}
        values = self.to_dict()
        for key, raw in pairs.items():
            if key not in types:
                raise ConfigurationError(f"unknown config key {key!r}")
            values[key] = _coerce(key, raw, types[key])
        return ExperimentConfig(**values).validate()

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "ExperimentConfig":
        try:
            with open(path, encoding="utf-8") as f:
                text = f.read()
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        pairs = parse_config_text(text)
        pairs.setdefault("name", os.path.splitext(os.path.basename(path))[0])
        pairs.update(overrides or {})
        return cls.from_pairs(pairs)


def parse_config_text(text: str) -> dict:
    """``key = value`` per line; ``#`` starts a comment."""
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        pairs[key] = value
    return pairs


def parse_overrides(items) -> dict:
    pairs = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v.strip()
    return pairs


def _coerce(key, raw, typ):
    if not isinstance(raw, str):
        return raw
    typ = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    try:
        if typ == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if typ == "int":
            return int(float(raw)) if "e" in raw.lower() else int(raw)
        if typ == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigurationError(f"bad value for {key}: {raw!r}") from exc
    return raw


# -- model ---------------------------------------------------------------------


@dataclass
class Model:
    cell: object  # CellParams
    head: dict
    policy: SkipPolicy
    loss_kind: str

    def all_weights(self) -> dict:
        return {**self.cell.weights, **self.head}


def build_model(cfg: ExperimentConfig, rng) -> Model:
    n_in, n_out, loss_kind = {
        "adding": (2, 1, "mse"),
        "freqdisc": (1, 2, "cross_entropy"),
        "mnist": (1, 10, "cross_entropy"),
    }[cfg.task]
    skip = cfg.policy == "learned"
    cell = init_params(
        cfg.cell, n_in, [cfg.hidden] * cfg.layers, rng, skip=skip, gate_layers=cfg.gate_layer_indices()
    )
    head = init_readout(rng, cfg.hidden, n_out)
    return Model(cell, head, cfg.skip_policy(), loss_kind)


def forward(tape: Tape, model: Model, inputs, rng=None, trace=False):
    """Unroll and read out; returns ``(prediction Var, Rollout)``."""
    p = bind(tape, model.cell)
    p.update({k: tape.param(k, v) for k, v in model.head.items()})
    ro = rollout(tape, model.cell, p, inputs, model.policy, rng, trace=trace)
    h_last = ro.state.layers[-1][0]
    return readout(tape, p, h_last), ro


def train_step(model: Model, opt: Adam, inputs, targets, budget: BudgetSpec, rng=None, batch_id=None) -> dict:
    try:
        tape = Tape()
        pred, ro = forward(tape, model, inputs, rng)
        loss_task = task_loss(tape, model.loss_kind, pred, targets)
        loss_budget = budget_loss(tape, ro.gates, budget)
        loss = loss_task + loss_budget
        grads = tape.backward(loss)
        opt.step(model.all_weights(), grads)
    except NumericError as exc:
        if batch_id is None:
            raise
        raise NumericError(f"batch {batch_id}: {exc}") from exc
    return {
        "loss": float(loss.value[0, 0]),
        "task_loss": float(loss_task.value[0, 0]),
        "budget_loss": float(loss_budget.value[0, 0]),
        "update_frac": float(ro.mask.mean()),
    }


def predict(model: Model, inputs: np.ndarray, rng=None) -> tuple[np.ndarray, np.ndarray]:
    """Batched inference without a graph; returns predictions and usage masks."""
    preds, masks = [], []
    for s in range(0, len(inputs), EVAL_CHUNK):
        tape = Tape(record=False)
        pred, ro = forward(tape, model, inputs[s : s + EVAL_CHUNK], rng)
        preds.append(pred.value)
        masks.append(ro.mask)
    return np.concatenate(preds), np.concatenate(masks)


def score(task: str, preds: np.ndarray, targets: np.ndarray) -> tuple[str, float, bool]:
    if task == "adding":
        mse = float(np.mean((preds[:, 0] - targets.reshape(-1)) ** 2))
        return "mse", mse, adding_solved(mse)
    acc = float(np.mean(preds.argmax(axis=1) == targets))
    if task == "freqdisc":
        return "accuracy", acc, freqdisc_solved(acc)
    return "accuracy", acc, False


# -- records ---------------------------------------------------------------------


@dataclass
class ResultRecord:
    config: dict
    config_hash: str
    version: str
    status: str = "ok"  # ok | failed
    error: str = ""
    task: str = ""
    metric_name: str = ""
    metric: float = float("nan")
    solved: bool = False
    steps_per_sequence: int = 0
    updates_mean: float = 0.0
    updates_std: float = 0.0
    update_frac_mean: float = 0.0
    update_frac_std: float = 0.0
    flops: float = 0.0
    flops_dense: float = 0.0
    train_batches: int = 0
    curves: list = field(default_factory=list)
    usage: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ResultRecord":
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), sort_keys=True, indent=2, allow_nan=True) + "\n"


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    return x


SUMMARY_COLUMNS = [
    "name",
    "config_hash",
    "status",
    "task",
    "cell",
    "policy",
    "lam",
    "p_skip",
    "seed",
    "metric_name",
    "metric",
    "solved",
    "updates_mean",
    "updates_std",
    "update_frac_mean",
    "update_frac_std",
    "flops",
    "train_batches",
]


def summary_row(rec: ResultRecord) -> dict:
    c = rec.config
    return {
        "name": c.get("name", ""),
        "config_hash": rec.config_hash,
        "status": rec.status,
        "task": rec.task,
        "cell": c.get("cell", ""),
        "policy": c.get("policy", ""),
        "lam": c.get("lam", ""),
        "p_skip": c.get("p_skip", ""),
        "seed": c.get("seed", ""),
        "metric_name": rec.metric_name,
        "metric": rec.metric,
        "solved": rec.solved,
        "updates_mean": rec.updates_mean,
        "updates_std": rec.updates_std,
        "update_frac_mean": rec.update_frac_mean,
        "update_frac_std": rec.update_frac_std,
        "flops": rec.flops,
        "train_batches": rec.train_batches,
    }


def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def emit(record: ResultRecord, out_dir, formats=("json", "csv")) -> list[str]:
    """Write the record; output bytes depend only on the record."""
    os.makedirs(out_dir, exist_ok=True)
    written = []

    def put(name, text):
        path = os.path.join(out_dir, name)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        written.append(path)

    formats = set(formats)
    unknown = formats - {"json", "csv"}
    if unknown:
        raise ConfigurationError(f"unknown output formats {sorted(unknown)}")
    if "json" in formats:
        put("result.json", record.to_json())
    if "csv" in formats:
        put("summary.csv", _csv_text(SUMMARY_COLUMNS, [summary_row(record)]))
        put("curves.csv", _csv_text(["step", "split", "metric", "value"], record.curves))
        if record.usage:
            cols = list(record.usage[0].keys())
            put("usage.csv", _csv_text(cols, record.usage))
    return written


# -- training loops ------------------------------------------------------------


def _data_dir(cfg: ExperimentConfig) -> str:
    path = cfg.mnist_dir or os.environ.get(DATA_ENV, "")
    if path and os.path.isdir(os.path.join(path, "mnist")) and not os.path.exists(
        os.path.join(path, "train-images-idx3-ubyte")
    ):
        path = os.path.join(path, "mnist")
    if not path:
        raise DataError(f"no MNIST directory configured (set mnist_dir or ${DATA_ENV})")
    return path


def _synthetic_batch(cfg, rng, n):
    if cfg.task == "adding":
        b = gen_adding(rng, n, cfg.length)
        return b.inputs, b.targets
    b = gen_freqdisc(rng, n, cfg.sampling_period)
    return b.inputs, b.labels


def _final_eval(cfg, model, inputs, targets, rng_eval, rec: ResultRecord, metrics: RunMetrics):
    preds, masks = predict(model, inputs, rng_eval)
    name, value, solved = score(cfg.task, preds, targets)
    metrics.metric_name, metrics.metric, metrics.solved = name, value, solved
    metrics.usage_masks = masks
    fm = FlopModel.from_params(model.cell)
    steps = masks.shape[1]
    metrics.flops = flops_per_sequence(fm, metrics.updates_mean, steps)
    rec.metric_name, rec.metric, rec.solved = name, value, solved
    rec.steps_per_sequence = steps
    rec.updates_mean, rec.updates_std = metrics.updates_mean, metrics.updates_std
    rec.update_frac_mean, rec.update_frac_std = metrics.update_frac_mean, metrics.update_frac_std
    rec.flops = float(metrics.flops)
    rec.flops_dense = float(flops_per_sequence(FlopModel(fm.cell, fm.input_size, fm.hidden_sizes), steps, steps))
    # usage export on the zero-work path for a few held-out examples
    k = min(cfg.usage_examples, len(inputs))
    if k:
        ff_masks = []
        policy_rng = spawn_rngs(cfg.seed + 7919, 1)[0]
        for i in range(k):
            _, m = fast_forward(model.cell, inputs[i], model.policy, policy_rng)
            ff_masks.append(m)
        ff_masks = np.array(ff_masks)
        rec.usage = usage_mask_export(ff_masks, inputs[:k], cfg.task)
        if model.policy.kind != "random":
            rec.extra["fast_path_mask_agreement"] = float(np.mean(ff_masks == masks[:k]))
    rec.extra["usage_mask_rows"] = masks.shape[0]


def run_experiment(cfg: ExperimentConfig, progress=None, return_state: bool = False):
    """Train and evaluate one configuration; NaN divergence yields a failed record.

    With ``return_state`` the trained :class:`Model` and the final
    :class:`RunMetrics` are returned alongside the record.
    """
    cfg = cfg.validate()
    rec = ResultRecord(cfg.to_dict(), cfg.config_hash(), __version__, task=cfg.task)
    rng_init, rng_data, rng_policy, rng_eval = spawn_rngs(cfg.seed, 4)
    model = build_model(cfg, rng_init)
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.clip)
    budget = cfg.budget_spec()
    metrics = RunMetrics()
    try:
        if cfg.task == "mnist":
            _train_mnist(cfg, model, opt, budget, rng_data, rng_policy, rng_eval, rec, metrics, progress)
        else:
            _train_synthetic(cfg, model, opt, budget, rng_data, rng_policy, rng_eval, rec, metrics, progress)
    except NumericError as exc:
        rec.status, rec.error = "failed", str(exc)
        log.error("run %s diverged: %s", rec.config_hash, exc)
    rec.curves = metrics.curves
    if return_state:
        return rec, model, metrics
    return rec


def _train_synthetic(cfg, model, opt, budget, rng_data, rng_policy, rng_eval, rec, metrics, progress):
    streak = 0
    for step in range(1, cfg.train_steps + 1):
        inputs, targets = _synthetic_batch(cfg, rng_data, cfg.batch_size)
        stats = train_step(model, opt, inputs, targets, budget, rng_policy, batch_id=step)
        rec.train_batches = step
        if step % cfg.eval_every == 0 or step == cfg.train_steps:
            for k, v in stats.items():
                metrics.curves.append({"step": step, "split": "train", "metric": k, "value": v})
            inputs_e, targets_e = _synthetic_batch(cfg, rng_eval, cfg.eval_size)
            preds, masks = predict(model, inputs_e, rng_eval)
            name, value, solved = score(cfg.task, preds, targets_e)
            metrics.curves.append({"step": step, "split": "eval", "metric": name, "value": value})
            metrics.curves.append(
                {"step": step, "split": "eval", "metric": "update_frac", "value": float(masks.mean())}
            )
            if progress:
                progress(step, name, value, float(masks.mean()))
            streak = streak + 1 if solved else 0
            if cfg.early_exit and streak >= cfg.patience:
                break
    inputs_e, targets_e = _synthetic_batch(cfg, rng_eval, cfg.eval_size)
    _final_eval(cfg, model, inputs_e, targets_e, rng_eval, rec, metrics)


def _train_mnist(cfg, model, opt, budget, rng_data, rng_policy, rng_eval, rec, metrics, progress):
    data = load_mnist(
        _data_dir(cfg),
        rng_data,
        val_size=cfg.mnist_val_size,
        profile=cfg.mnist_profile,
        desk_size=cfg.mnist_desk_size,
    )
    rec.extra["mnist_checksums"] = data["checksums"]
    train, val, test = data["train"], data["val"], data["test"]
    batches = 0
    for epoch in range(1, cfg.train_epochs + 1):
        order = rng_data.permutation(len(train))
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            batches += 1
            stats = train_step(
                model, opt, train.inputs(idx), train.labels[idx], budget, rng_policy, batch_id=batches
            )
        rec.train_batches = batches
        for k, v in stats.items():
            metrics.curves.append({"step": epoch, "split": "train", "metric": k, "value": v})
        preds, masks = predict(model, val.inputs(), rng_eval)
        _, acc, _ = score("mnist", preds, val.labels)
        metrics.curves.append({"step": epoch, "split": "val", "metric": "accuracy", "value": acc})
        metrics.curves.append({"step": epoch, "split": "val", "metric": "update_frac", "value": float(masks.mean())})
        if progress:
            progress(epoch, "accuracy", acc, float(masks.mean()))
    _final_eval(cfg, model, test.inputs(), test.labels, rng_eval, rec, metrics)


# -- tables --------------------------------------------------------------------


def _run_one(cfg: ExperimentConfig) -> ResultRecord:
    return run_experiment(cfg)


def run_table(configs, runs_per_config: int, seeds=None, workers: int = 1, out_dir=None):
    """Run every config over a seed grid and aggregate one row per config.

    A row is ``incomplete`` when any of its runs failed.
    """
    if runs_per_config < 1:
        raise ConfigurationError("runs_per_config must be >= 1")
    configs = list(configs)
    seeds = list(seeds) if seeds else list(range(runs_per_config))
    if len(seeds) < runs_per_config:
        raise ConfigurationError("not enough seeds for the requested runs")
    jobs = [dataclasses.replace(c, seed=s) for c in configs for s in seeds[:runs_per_config]]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            records = list(pool.map(_run_one, jobs))
    else:
        records = [_run_one(j) for j in jobs]
    rows = []
    for i, cfg in enumerate(configs):
        recs = records[i * runs_per_config : (i + 1) * runs_per_config]
        if out_dir:
            for r in recs:
                emit(r, os.path.join(out_dir, f"{cfg.name or r.config_hash}_seed{r.config['seed']}"))
        ok = [r for r in recs if r.status == "ok"]
        agg = aggregate_runs(
            [
                {
                    "metric": r.metric,
                    "solved": float(r.solved),
                    "update_frac": r.update_frac_mean,
                    "updates": r.updates_mean,
                    "flops": r.flops,
                }
                for r in ok
            ]
        ) if ok else {}
        rows.append(
            {
                "name": cfg.name or cfg.config_hash(),
                "runs": len(recs),
                "incomplete": len(ok) != len(recs),
                "solved": bool(ok) and all(r.solved for r in ok) and len(ok) == len(recs),
                **{f"{k}_{s}": v[s] for k, v in agg.items() for s in ("mean", "std")},
            }
        )
    return rows


TABLE_COLUMNS = [
    "name",
    "runs",
    "incomplete",
    "solved",
    "metric_mean",
    "metric_std",
    "update_frac_mean",
    "update_frac_std",
    "updates_mean",
    "updates_std",
    "flops_mean",
    "flops_std",
]


def table_csv(rows) -> str:
    return _csv_text(TABLE_COLUMNS, rows)


def load_config_dir(path) -> list[ExperimentConfig]:
    if not os.path.isdir(path):
        raise ConfigurationError(f"config directory not found: {path}")
    names = sorted(n for n in os.listdir(path) if n.endswith(".cfg"))
    return [ExperimentConfig.from_file(os.path.join(path, n)) for n in names]


__all__ = [
    "ExperimentConfig",
    "ResultRecord",
    "SkipRNNError",
    "emit",
    "run_experiment",
    "run_table",
]
