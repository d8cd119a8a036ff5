"""LSTM/GRU stacks with a learned binary state-update gate.

A skip cell keeps an accumulator ``u_tilde`` in [0, 1].  Each step it is
rounded to a binary decision ``u``; ``u = 1`` runs the wrapped recurrent
stack, ``u = 0`` copies the previous state.  After the step the gate emits
``delta_u = sigmoid(W_p . s + b_p)`` and the accumulator either restarts at
``delta_u`` (after an update) or grows by it (after a copy), clamped at 1.

Everything here runs on a :class:`~skiprnn.autodiff.Tape`; inference code
passes ``Tape(record=False)``.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Var
from .errors import ConfigurationError, DataError, NumericError

GATES_PER_CELL = {"lstm": 4, "gru": 3}
LSTM_FORGET_BIAS = 1.0
GATE_BIAS_INIT = 1.0


@dataclass(frozen=True)
class SkipPolicy:
    kind: str = "learned"  # learned | random | always_update
    p_skip: float = 0.0
    binarizer: str = "deterministic"  # deterministic | bernoulli

    def __post_init__(self):
        if self.kind not in ("learned", "random", "always_update"):
            raise ConfigurationError(f"unknown skip policy {self.kind!r}")
        if self.binarizer not in ("deterministic", "bernoulli"):
            raise ConfigurationError(f"unknown binarizer {self.binarizer!r}")
        if not 0.0 <= self.p_skip < 1.0:
            raise ConfigurationError(f"p_skip must lie in [0, 1), got {self.p_skip}")
        if self.kind != "random" and self.p_skip != 0.0:
            raise ConfigurationError("p_skip only applies to the random policy")


@dataclass
class CellParams:
    """Weights of a (possibly skip-gated) recurrent stack.

    ``weights`` maps names to float64 arrays:

    * ``l{i}.W`` / ``l{i}.b`` -- LSTM affine map of ``[x, h]`` to gates i, f, o
      and the candidate g, in that column order
    * ``l{i}.Wg`` / ``l{i}.bg`` / ``l{i}.Wc`` / ``l{i}.bc`` -- GRU reset/update
      gates and candidate
    * ``l{i}.h0`` (and ``l{i}.c0`` for LSTM) -- learned initial state
    * ``gate.W`` (``H_total x 1``) / ``gate.b`` (``1 x 1``) -- update gate,
      present only for skip cells
    """

    cell: str
    input_size: int
    hidden_sizes: tuple[int, ...]
    gate_layers: tuple[int, ...] = ()
    weights: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def skip(self) -> bool:
        return "gate.W" in self.weights

    @property
    def total_hidden(self) -> int:
        return sum(self.hidden_sizes)

    def gate_mask(self) -> np.ndarray:
        return stack_gate_mask(self.hidden_sizes, self.gate_layers)

    def copy(self) -> "CellParams":
        return CellParams(
            self.cell,
            self.input_size,
            self.hidden_sizes,
            self.gate_layers,
            {k: v.copy() for k, v in self.weights.items()},
        )


@dataclass
class SkipCellState:
    """Per-batch recurrent state.

    ``layers`` holds ``(h, c)`` per layer (``c`` is ``None`` for GRU).
    ``u_tilde`` and ``u`` are ``(B, 1)``; ``update_count`` is an int array
    of length ``B``.
    """

    layers: list
    u_tilde: Var | None = None
    u: Var | None = None
    delta_u: Var | None = None
    update_count: np.ndarray | None = None


def stack_gate_mask(hidden_sizes, gate_layers) -> np.ndarray:
    """Boolean mask over the concatenated hidden width; True = gate may read it."""
    hidden_sizes = [int(h) for h in hidden_sizes]
    gate_layers = list(gate_layers)
    if not gate_layers:
        raise ConfigurationError("the update gate must read at least one layer")
    for i in gate_layers:
        if not 0 <= i < len(hidden_sizes):
            raise ConfigurationError(f"gate layer {i} out of range")
    mask = np.zeros(sum(hidden_sizes), dtype=bool)
    start = 0
    for i, h in enumerate(hidden_sizes):
        if i in gate_layers:
            mask[start : start + h] = True
        start += h
    return mask


def _orthogonal(rng, n):
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def init_params(
    cell: str,
    input_size: int,
    hidden_sizes,
    rng: np.random.Generator,
    skip: bool = True,
    gate_layers=None,
) -> CellParams:
    """Orthogonal recurrent blocks, fan-in scaled uniform input blocks."""
    if cell not in GATES_PER_CELL:
        raise ConfigurationError(f"unknown cell {cell!r}")
    hidden_sizes = tuple(int(h) for h in hidden_sizes)
    if input_size <= 0 or not hidden_sizes or min(hidden_sizes) <= 0:
        raise ConfigurationError("input and hidden sizes must be positive")
    if gate_layers is None:
        gate_layers = (len(hidden_sizes) - 1,)
    gate_layers = tuple(sorted(set(int(i) for i in gate_layers)))
    w = {}
    n_in = input_size
    for i, h in enumerate(hidden_sizes):
        scale = 1.0 / math.sqrt(n_in)

        def block(k):
            x_part = rng.uniform(-scale, scale, (n_in, k * h))
            h_part = np.concatenate([_orthogonal(rng, h) for _ in range(k)], axis=1)
            return np.concatenate([x_part, h_part], axis=0)

        if cell == "lstm":
            w[f"l{i}.W"] = block(4)
            b = np.zeros((1, 4 * h))
            b[:, h : 2 * h] = LSTM_FORGET_BIAS
            w[f"l{i}.b"] = b
            w[f"l{i}.c0"] = np.zeros((1, h))
        else:
            w[f"l{i}.Wg"] = block(2)
            w[f"l{i}.bg"] = np.zeros((1, 2 * h))
            w[f"l{i}.Wc"] = block(1)
            w[f"l{i}.bc"] = np.zeros((1, h))
        w[f"l{i}.h0"] = np.zeros((1, h))
        n_in = h
    params = CellParams(cell, input_size, hidden_sizes, gate_layers if skip else (), w)
    if skip:
        mask = stack_gate_mask(hidden_sizes, gate_layers)
        bound = 1.0 / math.sqrt(int(mask.sum()))
        gw = rng.uniform(-bound, bound, (sum(hidden_sizes), 1))
        gw[~mask] = 0.0
        w["gate.W"] = gw
        w["gate.b"] = np.full((1, 1), GATE_BIAS_INIT)
    return params


# -- binding and single steps ------------------------------------------------


def bind(tape: Tape, params: CellParams, prefix: str = "") -> dict[str, Var]:
    """Register every weight on ``tape`` and return the handles."""
    return {k: tape.param(prefix + k, v) for k, v in params.weights.items()}


def initial_state(tape: Tape, params: CellParams, p: dict, batch: int) -> SkipCellState:
    layers = []
    for i in range(len(params.hidden_sizes)):
        h = tape.broadcast_rows(p[f"l{i}.h0"], batch)
        c = tape.broadcast_rows(p[f"l{i}.c0"], batch) if params.cell == "lstm" else None
        layers.append((h, c))
    state = SkipCellState(layers, update_count=np.zeros(batch, dtype=np.int64))
    if params.skip:
        state.u_tilde = tape.const(np.ones((batch, 1)))
    return state


def _lstm_layer(tape, p, i, h_size, h, c, x):
    z = tape.matmul(tape.concat([x, h]), p[f"l{i}.W"]) + p[f"l{i}.b"]
    act = tape.sigmoid_tanh(z, 3 * h_size)
    gi = tape.slice_cols(act, 0, h_size)
    gf = tape.slice_cols(act, h_size, 2 * h_size)
    go = tape.slice_cols(act, 2 * h_size, 3 * h_size)
    gg = tape.slice_cols(act, 3 * h_size, 4 * h_size)
    c_new = gf * c + gi * gg
    h_new = go * tape.tanh(c_new)
    return h_new, c_new


def _gru_layer(tape, p, i, h_size, h, x):
    gates = tape.sigmoid(tape.matmul(tape.concat([x, h]), p[f"l{i}.Wg"]) + p[f"l{i}.bg"])
    r = tape.slice_cols(gates, 0, h_size)
    z = tape.slice_cols(gates, h_size, 2 * h_size)
    cand = tape.tanh(tape.matmul(tape.concat([x, r * h]), p[f"l{i}.Wc"]) + p[f"l{i}.bc"])
    return tape.mix(z, h, cand)


def cell_step(tape: Tape, params: CellParams, p: dict, layers, x) -> list:
    """One step of the plain stack; returns new ``[(h, c), ...]``."""
    x = tape.const(x) if not isinstance(x, Var) else x
    if x.value.shape[1] != params.input_size:
        raise ConfigurationError(
            f"input width {x.value.shape[1]} != expected {params.input_size}"
        )
    out = []
    for i, ((h, c), h_size) in enumerate(zip(layers, params.hidden_sizes)):
        if params.cell == "lstm":
            h, c = _lstm_layer(tape, p, i, h_size, h, c, x)
        else:
            h = _gru_layer(tape, p, i, h_size, h, x)
        out.append((h, c))
        x = h
    return out


def gate_features(tape: Tape, params: CellParams, layers) -> Var:
    """State the update gate reads: cell memory for LSTM, hidden for GRU."""
    parts = [c if params.cell == "lstm" else h for h, c in layers]
    return parts[0] if len(parts) == 1 else tape.concat(parts)


def gate_delta(tape: Tape, params: CellParams, p: dict, layers) -> Var:
    w = p["gate.W"]
    mask = params.gate_mask()
    if not mask.all():
        w = w * mask.astype(np.float64).reshape(-1, 1)
    return tape.sigmoid(tape.matmul(gate_features(tape, params, layers), w) + p["gate.b"])


def _mix(tape, u, new, old):
    return None if new is None else tape.mix(u, new, old)


def skip_step(
    tape: Tape,
    params: CellParams,
    p: dict,
    state: SkipCellState,
    x,
    policy: SkipPolicy = SkipPolicy(),
    rng: np.random.Generator | None = None,
) -> SkipCellState:
    """One learned-gate step: binarize, update-or-copy, refill the accumulator."""
    if policy.binarizer == "bernoulli":
        if rng is None:
            raise ConfigurationError("the bernoulli binarizer needs an rng")
        u = tape.bernoulli_st(state.u_tilde, rng)
    else:
        u = tape.round_st(state.u_tilde)
    updated = cell_step(tape, params, p, state.layers, x)
    layers = [
        (_mix(tape, u, hn, ho), _mix(tape, u, cn, co))
        for (hn, cn), (ho, co) in zip(updated, state.layers)
    ]
    delta = gate_delta(tape, params, p, layers)
    ut = state.u_tilde
    # min(delta, 1 - ut) with ties resolved toward 1 - ut
    grow = ut + tape.minimum(1.0 - ut, delta)
    u_next = tape.mix(u, delta, grow)
    count = state.update_count + (u.value[:, 0] > 0.5)
    return SkipCellState(layers, u_next, u, delta, count)


def random_skip_step(
    tape: Tape,
    params: CellParams,
    p: dict,
    state: SkipCellState,
    x,
    rng: np.random.Generator,
    p_skip: float,
) -> SkipCellState:
    """Copy the state with probability ``p_skip``, otherwise run the stack."""
    batch = state.layers[0][0].value.shape[0]
    u = tape.const((rng.random((batch, 1)) >= p_skip).astype(np.float64))
    if p_skip == 0.0:
        layers = cell_step(tape, params, p, state.layers, x)
    else:
        updated = cell_step(tape, params, p, state.layers, x)
        layers = [
            (_mix(tape, u, hn, ho), _mix(tape, u, cn, co))
            for (hn, cn), (ho, co) in zip(updated, state.layers)
        ]
    count = state.update_count + (u.value[:, 0] > 0.5)
    return SkipCellState(layers, None, u, None, count)


@dataclass
class Rollout:
    state: SkipCellState
    gates: list  # u_t per step as (B, 1) Vars; empty for always_update
    mask: np.ndarray  # (B, T) bool usage mask
    u_tilde: np.ndarray | None = None  # (B, T) accumulator before each step


def rollout(
    tape: Tape,
    params: CellParams,
    p: dict,
    inputs: np.ndarray,
    policy: SkipPolicy,
    rng: np.random.Generator | None = None,
    trace: bool = False,
) -> Rollout:
    """Unroll the stack over ``inputs`` of shape ``(B, T, n_in)``."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 3:
        raise ConfigurationError(f"inputs must be (batch, time, features), got {inputs.shape}")
    batch, steps, _ = inputs.shape
    if policy.kind == "learned" and not params.skip:
        raise ConfigurationError("learned policy needs skip-cell parameters")
    if policy.kind == "random" and rng is None:
        raise ConfigurationError("random policy needs an rng")
    state = initial_state(tape, params, p, batch)
    gates = []
    mask = np.ones((batch, steps), dtype=bool)
    ut_trace = np.empty((batch, steps)) if trace and policy.kind == "learned" else None
    for t in range(steps):
        x = tape.const(inputs[:, t, :])
        if policy.kind == "always_update":
            state = SkipCellState(
                cell_step(tape, params, p, state.layers, x),
                update_count=state.update_count + 1,
            )
            continue
        if ut_trace is not None:
            ut_trace[:, t] = state.u_tilde.value[:, 0]
        if policy.kind == "learned":
            state = skip_step(tape, params, p, state, x, policy, rng)
        else:
            state = random_skip_step(tape, params, p, state, x, rng, policy.p_skip)
        gates.append(state.u)
        mask[:, t] = state.u.value[:, 0] > 0.5
    return Rollout(state, gates, mask, ut_trace)


# -- zero-work inference --------------------------------------------------------


def n_skip(delta_u: float) -> int:
    """Steps skipped after an update whose gate emitted ``delta_u``.

    Smallest positive ``n`` with ``n * delta_u >= 0.5``, minus one.
    """
    delta_u = float(delta_u)
    if not delta_u > 0.0 or math.isnan(delta_u):
        raise NumericError(f"delta_u must be positive, got {delta_u}")
    if delta_u >= 0.5:
        return 0
    n = max(1, math.ceil(0.5 / delta_u))
    while n > 1 and (n - 1) * delta_u >= 0.5:
        n -= 1
    while n * delta_u < 0.5:
        n += 1
    return n - 1


def fast_forward(
    params: CellParams,
    inputs: np.ndarray,
    policy: SkipPolicy = SkipPolicy(),
    rng: np.random.Generator | None = None,
) -> tuple[SkipCellState, np.ndarray]:
    """Run one sequence ``(T, n_in)`` touching the weights only on update steps.

    Returns the final state (batch of one) and the boolean usage mask.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim == 3 and inputs.shape[0] == 1:
        inputs = inputs[0]
    if inputs.ndim != 2:
        raise ConfigurationError(f"fast_forward takes one (time, features) sequence, got {inputs.shape}")
    steps = inputs.shape[0]
    tape = Tape(record=False)
    p = bind(tape, params)
    state = initial_state(tape, params, p, 1)
    layers = state.layers
    mask = np.zeros(steps, dtype=bool)
    if policy.kind == "always_update":
        mask[:] = True
    elif policy.kind == "random":
        if rng is None:
            raise ConfigurationError("random policy needs an rng")
        mask = rng.random((1, steps))[0] >= policy.p_skip
    elif policy.binarizer != "deterministic":
        raise ConfigurationError("fast_forward requires the deterministic binarizer")
    else:
        t = 0
        while t < steps:
            mask[t] = True
            layers = cell_step(tape, params, p, layers, inputs[t : t + 1])
            delta = gate_delta(tape, params, p, layers).value[0, 0]
            t += n_skip(delta) + 1
        count = np.array([mask.sum()], dtype=np.int64)
        return SkipCellState(layers, update_count=count), mask
    for t in np.flatnonzero(mask):
        layers = cell_step(tape, params, p, layers, inputs[t : t + 1])
    count = np.array([mask.sum()], dtype=np.int64)
    return SkipCellState(layers, update_count=count), mask


# -- checkpoints ----------------------------------------------------------------

CHECKPOINT_MAGIC = b"SKRN"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: CellParams, policy: SkipPolicy, extra: dict | None = None):
    """Write weights and policy.

    Layout (little-endian): magic ``SKRN``; u32 version; u32 header length;
    UTF-8 JSON header (cell, sizes, gate layers, policy, tensor names and
    shapes in file order); then every tensor's float64 values, row-major.
    """
    tensors = dict(params.weights)
    for k, v in (extra or {}).items():
        tensors[k] = np.asarray(v, dtype=np.float64)
    header = {
        "cell": params.cell,
        "input_size": params.input_size,
        "hidden_sizes": list(params.hidden_sizes),
        "gate_layers": list(params.gate_layers),
        "policy": {"kind": policy.kind, "p_skip": policy.p_skip, "binarizer": policy.binarizer},
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in tensors.items()],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        for v in tensors.values():
            f.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[CellParams, SkipPolicy, dict[str, np.ndarray]]:
    """Inverse of :func:`save_checkpoint`; tensors not owned by the cell come back separately."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a skiprnn checkpoint")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    offset = 12 + hlen
    tensors = {}
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        n = int(np.prod(shape))
        if offset + 8 * n > len(raw):
            raise DataError(f"{path}: truncated tensor {spec['name']}")
        tensors[spec["name"]] = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * n
    own = {k: v for k, v in tensors.items() if k.startswith(("l", "gate."))}
    extra = {k: v for k, v in tensors.items() if k not in own}
    params = CellParams(
        header["cell"],
        header["input_size"],
        tuple(header["hidden_sizes"]),
        tuple(header["gate_layers"]),
        own,
    )
    return params, SkipPolicy(**header["policy"]), extra
