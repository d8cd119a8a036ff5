"""Dense float64 arithmetic with tape-based reverse-mode differentiation.

Values are plain ``numpy`` arrays of rank 2 (scalars are ``(1, 1)``).  A
:class:`Tape` records every operation applied to its :class:`Var` handles and
:meth:`Tape.backward` replays the record in reverse.  The op set is closed:
each op below has exactly one forward and one backward rule.

A tape built with ``record=False`` evaluates the same ops without keeping any
graph, which is how inference paths share code with training.
"""
from __future__ import annotations

import numpy as np

from .errors import ConfigurationError, NumericError

__all__ = [
    "Tape",
    "Var",
    "as_tensor",
    "make_rng",
    "spawn_rngs",
    "round_half_up",
]


def as_tensor(data, shape=None) -> np.ndarray:
    """Coerce ``data`` to a finite float64 array of rank <= 2.

    Rank-0 and rank-1 inputs are promoted to ``(1, 1)`` and ``(1, n)``.
    """
    arr = np.array(data, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(d) for d in shape)
        if any(d <= 0 for d in shape):
            raise ConfigurationError(f"shape dimensions must be positive, got {shape}")
        if int(np.prod(shape)) != arr.size:
            raise ConfigurationError(f"cannot view {arr.size} values as shape {shape}")
        arr = arr.reshape(shape)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim > 2:
        raise ConfigurationError(f"tensors have rank <= 2, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise NumericError("tensor contains non-finite values")
    return arr


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator (Philox); the stream depends only on ``seed``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """Independent child streams derived from one seed."""
    children = np.random.SeedSequence(int(seed)).spawn(n)
    return [np.random.Generator(np.random.Philox(c)) for c in children]


def round_half_up(x):
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


def _sigmoid(x):
    y = np.negative(x)
    with np.errstate(over="ignore"):
        np.exp(y, out=y)
    y += 1.0
    return np.reciprocal(y, out=y)


_MAY_OVERFLOW = frozenset(
    {"matmul", "add", "sub", "mul", "mix", "square", "sum", "mean", "softmax_xent"}
)


class _ColumnGrad:
    """Gradient that is nonzero only on columns ``[start, stop)`` of its input."""

    __slots__ = ("start", "stop", "g")

    def __init__(self, start, stop, g):
        self.start, self.stop, self.g = start, stop, g


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


class Var:
    """Handle to a value produced on a tape.

    ``id`` is ``None`` for constants and for every value of a non-recording
    tape; such handles never receive gradients.
    """

    __slots__ = ("tape", "id", "value")
    __array_priority__ = 100

    def __init__(self, tape, id_, value):
        self.tape = tape
        self.id = id_
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.value.shape})"

    def __add__(self, other):
        return self.tape.add(self, other)

    def __radd__(self, other):
        return self.tape.add(other, self)

    def __sub__(self, other):
        return self.tape.sub(self, other)

    def __rsub__(self, other):
        return self.tape.sub(other, self)

    def __mul__(self, other):
        return self.tape.mul(self, other)

    def __rmul__(self, other):
        return self.tape.mul(other, self)

    def __matmul__(self, other):
        return self.tape.matmul(self, other)

    def __neg__(self):
        return self.tape.mul(self, -1.0)


class Tape:
    """Append-only record of differentiable ops.

    Each recorded node is ``(kind, input_ids, backward_fn)``; inputs always
    refer to earlier nodes so the list is already topologically ordered.
    Parameters are registered by name with :meth:`param` and
    :meth:`backward` returns one gradient per registered name.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self.nodes: list[tuple] = []
        self.params: dict[str, int] = {}
        self._shapes: list[tuple] = []

    def __len__(self):
        return len(self.nodes)

    # -- leaves -------------------------------------------------------------

    def param(self, name: str, value) -> Var:
        value = np.asarray(value, dtype=np.float64)
        if value.ndim != 2:
            value = as_tensor(value)
        if not self.record:
            return Var(self, None, value)
        if name in self.params:
            raise ConfigurationError(f"parameter {name!r} registered twice")
        id_ = self._push("leaf", (), None, value.shape)
        self.params[name] = id_
        return Var(self, id_, value)

    def const(self, value) -> Var:
        if isinstance(value, Var):
            return value
        value = np.asarray(value, dtype=np.float64)
        if value.ndim != 2:
            value = as_tensor(value)
        return Var(self, None, value)

    # -- bookkeeping --------------------------------------------------------

    def _push(self, kind, inputs, backward_fn, shape):
        self.nodes.append((kind, inputs, backward_fn))
        self._shapes.append(shape)
        return len(self.nodes) - 1

    def _out(self, kind, value, inputs, backward_fn):
        # ops outside _MAY_OVERFLOW map finite inputs to finite outputs
        if kind in _MAY_OVERFLOW and not np.isfinite(value).all():
            raise NumericError(
                f"op {kind!r} (node {len(self.nodes)}) produced non-finite values"
            )
        if not self.record:
            return Var(self, None, value)
        ids = tuple(v.id for v in inputs)
        if all(i is None for i in ids):
            return Var(self, None, value)
        return Var(self, self._push(kind, ids, backward_fn, value.shape), value)

    def _wrap(self, x):
        return x if isinstance(x, Var) else self.const(x)

    # -- ops ----------------------------------------------------------------

    def matmul(self, a, b) -> Var:
        a, b = self._wrap(a), self._wrap(b)
        av, bv = a.value, b.value
        if av.shape[1] != bv.shape[0]:
            raise ConfigurationError(f"matmul shape mismatch {av.shape} @ {bv.shape}")

        def back(g):
            return (
                g @ bv.T if a.id is not None else None,
                av.T @ g if b.id is not None else None,
            )

        return self._out("matmul", av @ bv, (a, b), back)

    def _check_broadcast(self, kind, av, bv):
        for da, db in zip(av.shape, bv.shape):
            if da != db and da != 1 and db != 1:
                raise ConfigurationError(f"{kind} shape mismatch {av.shape} vs {bv.shape}")

    def add(self, a, b) -> Var:
        a, b = self._wrap(a), self._wrap(b)
        self._check_broadcast("add", a.value, b.value)
        sa, sb = a.value.shape, b.value.shape

        def back(g):
            return _unbroadcast(g, sa), _unbroadcast(g, sb)

        return self._out("add", a.value + b.value, (a, b), back)

    def sub(self, a, b) -> Var:
        a, b = self._wrap(a), self._wrap(b)
        self._check_broadcast("sub", a.value, b.value)
        sa, sb = a.value.shape, b.value.shape

        def back(g):
            return _unbroadcast(g, sa), _unbroadcast(-g, sb)

        return self._out("sub", a.value - b.value, (a, b), back)

    def mul(self, a, b) -> Var:
        a, b = self._wrap(a), self._wrap(b)
        av, bv = a.value, b.value
        self._check_broadcast("mul", av, bv)

        def back(g):
            ga = _unbroadcast(g * bv, av.shape) if a.id is not None else None
            gb = _unbroadcast(g * av, bv.shape) if b.id is not None else None
            return ga, gb

        return self._out("mul", av * bv, (a, b), back)

    def minimum(self, a, b) -> Var:
        """Elementwise min; on ties the gradient goes to ``a``."""
        a, b = self._wrap(a), self._wrap(b)
        av, bv = a.value, b.value
        self._check_broadcast("min", av, bv)
        first = av <= bv

        def back(g):
            return (
                _unbroadcast(np.where(first, g, 0.0), av.shape),
                _unbroadcast(np.where(first, 0.0, g), bv.shape),
            )

        return self._out("min", np.where(first, av, bv), (a, b), back)

    def sigmoid(self, x) -> Var:
        x = self._wrap(x)
        y = _sigmoid(x.value)
        return self._out("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))

    def tanh(self, x) -> Var:
        x = self._wrap(x)
        y = np.tanh(x.value)
        return self._out("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))

    def relu(self, x) -> Var:
        x = self._wrap(x)
        pos = x.value > 0
        return self._out("relu", np.where(pos, x.value, 0.0), (x,), lambda g: (g * pos,))

    def round_st(self, x) -> Var:
        """Round half up; the backward pass is the identity."""
        x = self._wrap(x)
        return self._out("round_st", np.floor(x.value + 0.5), (x,), lambda g: (g,))

    def bernoulli_st(self, p, rng: np.random.Generator) -> Var:
        """Sample ``{0, 1}`` with ``P(1) = p``; the backward pass is the identity."""
        p = self._wrap(p)
        pv = p.value
        if (pv < 0).any() or (pv > 1).any():
            raise NumericError("bernoulli_st expects probabilities in [0, 1]")
        sample = (rng.random(pv.shape) < pv).astype(np.float64)
        return self._out("bernoulli_st", sample, (p,), lambda g: (g,))

    def mix(self, u, a, b) -> Var:
        """``u * a + (1 - u) * b`` with ``u`` broadcastable to ``a``.

        With ``u`` in {0, 1} the result equals ``a`` or ``b`` bitwise.
        """
        u, a, b = self._wrap(u), self._wrap(a), self._wrap(b)
        uv, av, bv = u.value, a.value, b.value
        self._check_broadcast("mix", uv, av)
        if av.shape != bv.shape:
            raise ConfigurationError(f"mix shape mismatch {av.shape} vs {bv.shape}")
        one_minus = 1.0 - uv

        def back(g):
            gu = _unbroadcast(g * (av - bv), uv.shape) if u.id is not None else None
            ga = g * uv if a.id is not None else None
            gb = g * one_minus if b.id is not None else None
            return gu, ga, gb

        return self._out("mix", uv * av + one_minus * bv, (u, a, b), back)

    def sigmoid_tanh(self, x, n_sigmoid: int) -> Var:
        """Sigmoid on the first ``n_sigmoid`` columns, tanh on the rest."""
        x = self._wrap(x)
        k = int(n_sigmoid)
        if not 0 <= k <= x.value.shape[1]:
            raise ConfigurationError(f"bad sigmoid width {k} for {x.value.shape}")
        y = np.empty_like(x.value)
        y[:, :k] = _sigmoid(x.value[:, :k])
        y[:, k:] = np.tanh(x.value[:, k:])

        def back(g):
            d = np.empty_like(y)
            ys, yt = y[:, :k], y[:, k:]
            d[:, :k] = ys * (1.0 - ys)
            d[:, k:] = 1.0 - yt * yt
            return (g * d,)

        return self._out("sigmoid_tanh", y, (x,), back)

    def square(self, x) -> Var:
        x = self._wrap(x)
        xv = x.value
        return self._out("square", xv * xv, (x,), lambda g: (2.0 * g * xv,))

    def abs(self, x) -> Var:
        x = self._wrap(x)
        sign = np.sign(x.value)
        return self._out("abs", np.abs(x.value), (x,), lambda g: (g * sign,))

    def sum(self, x) -> Var:
        x = self._wrap(x)
        shape = x.value.shape
        return self._out(
            "sum", x.value.sum().reshape(1, 1), (x,), lambda g: (np.broadcast_to(g, shape),)
        )

    def mean(self, x) -> Var:
        x = self._wrap(x)
        shape = x.value.shape
        n = x.value.size
        return self._out(
            "mean",
            x.value.mean().reshape(1, 1),
            (x,),
            lambda g: (np.broadcast_to(g / n, shape),),
        )

    def concat(self, parts) -> Var:
        """Join along columns."""
        parts = [self._wrap(p) for p in parts]
        rows = {p.value.shape[0] for p in parts}
        if len(rows) != 1:
            raise ConfigurationError(f"concat row mismatch {[p.value.shape for p in parts]}")
        bounds = np.cumsum([0] + [p.value.shape[1] for p in parts])

        def back(g):
            return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts)))

        return self._out("concat", np.concatenate([p.value for p in parts], axis=1), parts, back)

    def slice_cols(self, x, start: int, stop: int) -> Var:
        x = self._wrap(x)
        shape = x.value.shape
        if not 0 <= start < stop <= shape[1]:
            raise ConfigurationError(f"bad column slice [{start}:{stop}] of {shape}")

        return self._out(
            "slice", x.value[:, start:stop], (x,), lambda g: (_ColumnGrad(start, stop, g),)
        )

    def broadcast_rows(self, x, rows: int) -> Var:
        """Repeat a ``(1, n)`` row ``rows`` times."""
        x = self._wrap(x)
        if x.value.shape[0] != 1:
            raise ConfigurationError(f"broadcast_rows expects one row, got {x.value.shape}")
        out = np.repeat(x.value, rows, axis=0)
        return self._out(
            "broadcast_rows", out, (x,), lambda g: (g.sum(axis=0, keepdims=True),)
        )

    def softmax_cross_entropy(self, logits, labels) -> Var:
        """Batch-mean cross-entropy of integer ``labels`` under ``softmax(logits)``."""
        logits = self._wrap(logits)
        z = logits.value
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if labels.shape[0] != z.shape[0]:
            raise ConfigurationError("one label per logits row required")
        if labels.min() < 0 or labels.max() >= z.shape[1]:
            raise ConfigurationError("label index out of range")
        shifted = z - z.max(axis=1, keepdims=True)
        logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        logp = shifted - logsumexp
        rows = np.arange(z.shape[0])
        loss = -logp[rows, labels].mean()

        def back(g):
            grad = np.exp(logp)
            grad[rows, labels] -= 1.0
            return (grad * (g[0, 0] / z.shape[0]),)

        return self._out("softmax_xent", np.array([[loss]]), (logits,), back)

    # -- reverse pass -------------------------------------------------------

    def backward(self, loss: Var) -> dict[str, np.ndarray]:
        """Gradients of scalar ``loss`` w.r.t. every registered parameter.

        Parameters the loss does not depend on receive zeros.  Gradients from
        repeated uses of one node are summed.
        """
        if not self.record:
            raise ConfigurationError("cannot differentiate a non-recording tape")
        if loss.value.size != 1:
            raise ConfigurationError(f"loss must be scalar, got shape {loss.value.shape}")
        grads: list = [None] * len(self.nodes)
        owned = [False] * len(self.nodes)
        if loss.id is not None:
            grads[loss.id] = np.ones_like(loss.value)
        for i in range(len(self.nodes) - 1, -1, -1):
            g = grads[i]
            if g is None:
                continue
            kind, inputs, back = self.nodes[i]
            if back is None:
                continue
            for j, gj in zip(inputs, back(g)):
                if j is None or gj is None:
                    continue
                if isinstance(gj, _ColumnGrad):
                    if grads[j] is None:
                        grads[j] = np.zeros(self._shapes[j])
                    elif not owned[j]:
                        grads[j] = np.array(grads[j], dtype=np.float64)
                    owned[j] = True
                    grads[j][:, gj.start : gj.stop] += gj.g
                elif grads[j] is None:
                    grads[j] = gj
                else:
                    # fresh array: incoming gradients may alias each other
                    grads[j] = grads[j] + gj
                    owned[j] = True
            if kind != "leaf":
                grads[i] = None
        return {
            name: (grads[i] if grads[i] is not None else np.zeros(self._shapes[i]))
            for name, i in self.params.items()
        }
