"""Task losses, update-budget penalties, and Adam with global-norm clipping."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Var
from .errors import ConfigurationError, NumericError


@dataclass(frozen=True)
class BudgetSpec:
    """Penalty on the number of state updates per sequence.

    ``cost_per_sample`` charges ``weight`` per executed update;
    ``l1_target``/``l2_target`` penalise the distance of the update count to
    ``target``.  The per-sequence penalty is averaged over the batch.
    """

    kind: str = "none"  # none | cost_per_sample | l1_target | l2_target
    weight: float = 0.0
    target: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "cost_per_sample", "l1_target", "l2_target"):
            raise ConfigurationError(f"unknown budget kind {self.kind!r}")
        if self.weight < 0:
            raise ConfigurationError("budget weight must be non-negative")
        if self.target < 0:
            raise ConfigurationError("budget target must be non-negative")

    @classmethod
    def cost_per_sample(cls, lam: float) -> "BudgetSpec":
        return cls("cost_per_sample", lam)


def budget_loss(tape: Tape, gates: list, spec: BudgetSpec) -> Var:
    """Batch mean of the per-sequence budget penalty over the ``(B, 1)`` gates."""
    if spec.kind == "none" or not gates or spec.weight == 0.0:
        return tape.const(np.zeros((1, 1)))
    steps = len(gates)
    if spec.kind != "cost_per_sample" and spec.target > steps:
        raise ConfigurationError(f"update target {spec.target} exceeds sequence length {steps}")
    total = gates[0]
    for u in gates[1:]:
        total = total + u
    if spec.kind == "cost_per_sample":
        per_seq = total
    elif spec.kind == "l1_target":
        per_seq = tape.abs(total - spec.target)
    else:
        per_seq = tape.square(total - spec.target)
    return tape.mean(per_seq) * spec.weight


def task_loss(tape: Tape, kind: str, prediction: Var, target) -> Var:
    """Batch-mean MSE or softmax cross-entropy.

    For ``cross_entropy`` the target is class indices or a one-hot matrix.
    """
    if kind == "mse":
        target = np.asarray(target, dtype=np.float64).reshape(prediction.value.shape)
        loss = tape.mean(tape.square(prediction - target))
    elif kind == "cross_entropy":
        target = np.asarray(target)
        if target.ndim == 2 and target.shape == prediction.value.shape:
            target = target.argmax(axis=1)
        loss = tape.softmax_cross_entropy(prediction, target)
    else:
        raise ConfigurationError(f"unknown task loss {kind!r}")
    if not np.isfinite(loss.value).all():
        raise NumericError(f"{kind} loss is not finite")
    return loss


def init_readout(rng: np.random.Generator, n_in: int, n_out: int) -> dict[str, np.ndarray]:
    bound = 1.0 / math.sqrt(n_in)
    return {
        "head.W": rng.uniform(-bound, bound, (n_in, n_out)),
        "head.b": np.zeros((1, n_out)),
    }


def readout(tape: Tape, p: dict, features: Var) -> Var:
    return tape.matmul(features, p["head.W"]) + p["head.b"]


def clip_by_global_norm(grads: dict, threshold: float) -> tuple[dict, float]:
    """Scale all gradients jointly so their global L2 norm is at most ``threshold``."""
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if not math.isfinite(norm):
        raise NumericError("gradient norm is not finite")
    if norm > threshold:
        scale = threshold / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


@dataclass
class Adam:
    """Bias-corrected Adam preceded by global-norm clipping.

    ``step`` updates the parameter arrays in place.  Boolean arrays in
    ``frozen_masks`` pin individual entries (True = never moves).
    """

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: float | None = 1.0
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    last_grad_norm: float = 0.0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], frozen_masks=None):
        missing = set(params) - set(grads)
        if missing:
            raise ConfigurationError(f"no gradient for {sorted(missing)}")
        for k, g in grads.items():
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for {k!r} at step {self.t + 1}")
        if self.clip is not None:
            grads, self.last_grad_norm = clip_by_global_norm(grads, self.clip)
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, p in params.items():
            g = grads[k]
            if frozen_masks and k in frozen_masks:
                g = np.where(frozen_masks[k], 0.0, g)
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params
