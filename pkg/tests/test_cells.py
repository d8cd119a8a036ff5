import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import central_diff, rel_err
from skiprnn.autodiff import Tape
from skiprnn.cells import (
    SkipPolicy,
    bind,
    cell_step,
    fast_forward,
    init_params,
    initial_state,
    load_checkpoint,
    n_skip,
    rollout,
    save_checkpoint,
    skip_step,
    stack_gate_mask,
)
from skiprnn.errors import ConfigurationError, DataError, NumericError
from skiprnn.objectives import Adam, BudgetSpec, budget_loss, init_readout, readout, task_loss
from skiprnn.tasks import gen_adding


def logit(p):
    return math.log(p / (1 - p))


# -- plain numpy reference, written independently of the tape ---------------------


def _sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def ref_cell(params, w, layers, x):
    out = []
    for i, ((h, c), n) in enumerate(zip(layers, params.hidden_sizes)):
        xh = np.concatenate([x, h], axis=1)
        if params.cell == "lstm":
            z = xh @ w[f"l{i}.W"] + w[f"l{i}.b"]
            gi, gf, go = _sig(z[:, :n]), _sig(z[:, n : 2 * n]), _sig(z[:, 2 * n : 3 * n])
            gg = np.tanh(z[:, 3 * n :])
            c = gf * c + gi * gg
            h = go * np.tanh(c)
        else:
            g = _sig(xh @ w[f"l{i}.Wg"] + w[f"l{i}.bg"])
            r, zt = g[:, :n], g[:, n:]
            cand = np.tanh(np.concatenate([x, r * h], axis=1) @ w[f"l{i}.Wc"] + w[f"l{i}.bc"])
            h = zt * h + (1 - zt) * cand
        out.append((h, c))
        x = h
    return out


def ref_skip_rollout(params, w, inputs, frozen=None):
    """Step-by-step skip recurrence.

    With ``frozen=None`` the binary gate is ``round(u_tilde)`` and the
    per-step ``(round(u_tilde), u_tilde)`` pairs are returned.  Given those
    pairs, the gate becomes ``r0 + (u_tilde - u_tilde0)``: equal in value at
    the recorded point, with derivative exactly the straight-through one.
    """
    batch, steps, _ = inputs.shape
    layers = []
    for i, _ in enumerate(params.hidden_sizes):
        h = np.repeat(w[f"l{i}.h0"], batch, axis=0)
        c = np.repeat(w[f"l{i}.c0"], batch, axis=0) if params.cell == "lstm" else None
        layers.append((h, c))
    mask = params.gate_mask().astype(float).reshape(-1, 1)
    ut = np.ones((batch, 1))
    record, us = [], []
    for t in range(steps):
        if frozen is None:
            u = np.floor(ut + 0.5)
            record.append((u, ut.copy()))
        else:
            r0, ut0 = frozen[t]
            u = r0 + (ut - ut0)
        us.append(u)
        new = ref_cell(params, w, layers, inputs[:, t, :])
        layers = [
            (u * hn + (1 - u) * ho, None if cn is None else u * cn + (1 - u) * co)
            for (hn, cn), (ho, co) in zip(new, layers)
        ]
        feats = np.concatenate([c if params.cell == "lstm" else h for h, c in layers], axis=1)
        delta = _sig(feats @ (w["gate.W"] * mask) + w["gate.b"])
        ut = u * delta + (1 - u) * (ut + np.minimum(delta, 1 - ut))
    return layers, us, record


def brute_force_skips(delta):
    """Skipped steps after an update, by simulating the accumulator."""
    ut, skips = delta, 0
    while ut < 0.5:
        skips += 1
        ut = ut + min(delta, 1 - ut)
    return skips


def _skip_params(cell, seed, n_in=2, hidden=(3,), gate_bias=None, gate_layers=None):
    rng = np.random.default_rng(seed)
    params = init_params(cell, n_in, hidden, rng, skip=True, gate_layers=gate_layers)
    for k, v in params.weights.items():
        if k.endswith((".h0", ".c0")):
            params.weights[k] = rng.uniform(-0.5, 0.5, v.shape)
    params.weights["gate.W"] *= 3.0
    if gate_bias is not None:
        params.weights["gate.b"][:] = gate_bias
    return params


# -- cell_step ------------------------------------------------------------------


def test_gru_zero_weights_halves_state():
    params = init_params("gru", 2, (3,), np.random.default_rng(0), skip=False)
    for v in params.weights.values():
        v[:] = 0.0
    h0 = np.array([[1.0, -2.0, 0.5]])
    t = Tape(record=False)
    p = bind(t, params)
    out = cell_step(t, params, p, [(t.const(h0), None)], np.array([[0.3, -0.7]]))
    # r = z = 0.5, candidate tanh(0) = 0, h = 0.5 h0
    np.testing.assert_allclose(out[0][0].value, 0.5 * h0, rtol=0, atol=1e-15)


def test_lstm_zero_input_zero_state_hand_value():
    rng = np.random.default_rng(1)
    params = init_params("lstm", 2, (4,), rng, skip=False)
    b = rng.standard_normal((1, 16))
    params.weights["l0.b"] = b
    t = Tape(record=False)
    p = bind(t, params)
    zero = t.const(np.zeros((1, 4)))
    (h, c), = cell_step(t, params, p, [(zero, zero)], np.zeros((1, 2)))
    sig = lambda x: 1 / (1 + np.exp(-x))
    c_hand = sig(b[:, :4]) * np.tanh(b[:, 12:])
    np.testing.assert_allclose(c.value, c_hand, rtol=1e-14)
    np.testing.assert_allclose(h.value, np.tanh(c_hand) * sig(b[:, 8:12]), rtol=1e-14)


def test_lstm_forget_bias_is_one():
    params = init_params("lstm", 1, (5,), np.random.default_rng(0), skip=False)
    b = params.weights["l0.b"][0]
    assert (b[5:10] == 1.0).all() and (b[:5] == 0).all() and (b[10:] == 0).all()


def test_cell_step_deterministic_and_width_check():
    params = init_params("lstm", 2, (3, 4), np.random.default_rng(2), skip=False)
    t = Tape(record=False)
    p = bind(t, params)
    state = initial_state(t, params, p, 3)
    x = np.random.default_rng(3).standard_normal((3, 2))
    a = cell_step(t, params, p, state.layers, x)
    b = cell_step(t, params, p, state.layers, x)
    for (ha, ca), (hb, cb) in zip(a, b):
        assert np.array_equal(ha.value, hb.value) and np.array_equal(ca.value, cb.value)
    with pytest.raises(ConfigurationError):
        cell_step(t, params, p, state.layers, np.zeros((3, 5)))


@pytest.mark.parametrize("cell", ["lstm", "gru"])
def test_cell_matches_numpy_reference(cell):
    params = _skip_params(cell, 5, hidden=(3, 4))
    w = params.weights
    x = np.random.default_rng(6).standard_normal((2, 2))
    t = Tape(record=False)
    p = bind(t, params)
    layers = initial_state(t, params, p, 2).layers
    got = cell_step(t, params, p, layers, x)
    ref = ref_cell(params, w, [(l[0].value, None if l[1] is None else l[1].value) for l in layers], x)
    for (hg, _), (hr, _) in zip(got, ref):
        np.testing.assert_allclose(hg.value, hr, rtol=1e-13, atol=1e-15)


@pytest.mark.parametrize("cell", ["lstm", "gru"])
def test_single_step_gradient_finite_differences(cell):
    params = _skip_params(cell, 8, hidden=(3,))
    x = np.random.default_rng(9).standard_normal((2, 2))
    wout = np.random.default_rng(10).standard_normal((2, 3))
    t = Tape()
    p = bind(t, params)
    (h, _), = cell_step(t, params, p, initial_state(t, params, p, 2).layers, x)
    grads = t.backward(t.sum(t.mul(h, wout)))

    def f():
        init = [(np.repeat(params.weights["l0.h0"], 2, 0),
                 np.repeat(params.weights["l0.c0"], 2, 0) if cell == "lstm" else None)]
        return float((ref_cell(params, params.weights, init, x)[0][0] * wout).sum())

    for name, value in params.weights.items():
        if name.startswith("gate."):
            continue
        assert rel_err(grads[name], central_diff(f, value)) < 1e-4, name


# -- full rollout gradient through the straight-through surrogate ----------------------


@pytest.mark.parametrize("cell", ["lstm", "gru"])
def test_skip_rollout_gradient_matches_surrogate_finite_differences(cell):
    params = _skip_params(cell, 11, hidden=(3,), gate_bias=-0.3)
    inputs = np.random.default_rng(12).standard_normal((4, 5, 2))
    wout = np.random.default_rng(13).standard_normal((4, 3))
    lam = 0.37

    t = Tape()
    p = bind(t, params)
    ro = rollout(t, params, p, inputs, SkipPolicy())
    assert 0 < ro.mask.sum() < ro.mask.size, "rollout should mix updates and copies"
    loss = t.sum(t.mul(ro.state.layers[0][0], wout)) + t.mul(t.sum(t.concat(ro.gates)), lam)
    grads = t.backward(loss)

    ref_layers, _, frozen = ref_skip_rollout(params, params.weights, inputs)
    np.testing.assert_allclose(ro.state.layers[0][0].value, ref_layers[0][0], rtol=1e-12, atol=1e-14)
    np.testing.assert_array_equal(ro.mask, np.concatenate([u for u, _ in frozen], axis=1) > 0.5)

    def f():
        layers, us, _ = ref_skip_rollout(params, params.weights, inputs, frozen)
        return float((layers[0][0] * wout).sum() + lam * sum(u.sum() for u in us))

    for name, value in params.weights.items():
        assert rel_err(grads[name], central_diff(f, value)) < 1e-4, name


# -- skip_step examples --------------------------------------------------------------


def _state_with(t, params, p, u_tilde):
    state = initial_state(t, params, p, len(u_tilde))
    state.u_tilde = t.const(np.asarray(u_tilde, dtype=float).reshape(-1, 1))
    return state


def _const_gate(cell, delta):
    params = _skip_params(cell, 0, hidden=(3,))
    params.weights["gate.W"][:] = 0.0
    params.weights["gate.b"][:] = logit(delta)
    return params


def test_skip_step_flushes_after_update():
    params = _const_gate("lstm", 0.3)
    t = Tape(record=False)
    p = bind(t, params)
    s = skip_step(t, params, p, _state_with(t, params, p, [1.0]), np.ones((1, 2)))
    assert s.u.value[0, 0] == 1.0
    assert s.u_tilde.value[0, 0] == pytest.approx(0.3) == s.delta_u.value[0, 0]
    assert s.update_count[0] == 1


def test_skip_step_copies_and_accumulates():
    params = _const_gate("gru", 0.3)
    t = Tape(record=False)
    p = bind(t, params)
    before = _state_with(t, params, p, [0.3])
    s = skip_step(t, params, p, before, np.ones((1, 2)))
    assert s.u.value[0, 0] == 0.0
    assert np.array_equal(s.layers[0][0].value, before.layers[0][0].value)
    assert s.u_tilde.value[0, 0] == pytest.approx(0.6)
    assert s.update_count[0] == 0


def test_skip_step_clamps_accumulator():
    params = _const_gate("lstm", 0.4)
    t = Tape(record=False)
    p = bind(t, params)
    s = skip_step(t, params, p, _state_with(t, params, p, [0.9]), np.ones((1, 2)))
    assert s.u.value[0, 0] == 1.0  # round(0.9)
    params.weights["gate.b"][:] = logit(0.4)
    s = skip_step(t, params, p, _state_with(t, params, p, [0.45]), np.ones((1, 2)))
    assert s.u.value[0, 0] == 0.0
    assert s.u_tilde.value[0, 0] == pytest.approx(0.85)


def test_skip_step_min_clamp_hits_one():
    # u_tilde = 0.9 would round to an update, so exercise the clamp on a copy
    # step just below the threshold with a large refill
    params = _const_gate("lstm", 0.9)
    t = Tape(record=False)
    p = bind(t, params)
    s = skip_step(t, params, p, _state_with(t, params, p, [0.4]), np.ones((1, 2)))
    assert s.u.value[0, 0] == 0.0
    assert s.u_tilde.value[0, 0] == 1.0


def test_first_step_always_updates():
    params = _skip_params("lstm", 3, gate_bias=-20.0)
    t = Tape(record=False)
    ro = rollout(t, params, bind(t, params), np.zeros((5, 6, 2)), SkipPolicy())
    assert ro.mask[:, 0].all()
    assert not ro.mask[:, 1:].any()


def test_zero_gate_weights_at_init_update_every_step():
    params = init_params("gru", 2, (4,), np.random.default_rng(0))
    params.weights["gate.W"][:] = 0.0
    t = Tape(record=False)
    ro = rollout(t, params, bind(t, params), np.random.default_rng(1).standard_normal((3, 20, 2)), SkipPolicy())
    assert ro.mask.all()


def test_gate_bias_initialized_to_one():
    params = init_params("lstm", 1, (8,), np.random.default_rng(0))
    assert params.weights["gate.b"].shape == (1, 1) and params.weights["gate.b"][0, 0] == 1.0


# -- n_skip --------------------------------------------------------------------


@pytest.mark.parametrize("delta,expected", [(0.5, 0), (0.3, 1), (0.1, 4), (1.0, 0), (0.25, 1), (0.2, 2)])
def test_n_skip_examples(delta, expected):
    assert n_skip(delta) == expected


@pytest.mark.parametrize("bad", [0.0, -0.1, float("nan")])
def test_n_skip_rejects_nonpositive(bad):
    with pytest.raises(NumericError):
        n_skip(bad)


def test_n_skip_matches_brute_force_on_random_deltas():
    rng = np.random.default_rng(2024)
    deltas = 1.0 - rng.random(10_000)  # (0, 1]
    deltas[:100] = rng.uniform(1e-3, 0.05, 100)  # long skips too
    for d in deltas:
        assert n_skip(d) == brute_force_skips(d), d


# -- fast_forward ----------------------------------------------------------------


def _naive_mask(params, seq):
    t = Tape(record=False)
    ro = rollout(t, params, bind(t, params), seq[None], SkipPolicy())
    return ro.state, ro.mask[0]


def test_fast_forward_constant_refill_every_second_step():
    params = _const_gate("lstm", 0.3)
    state, mask = fast_forward(params, np.zeros((10, 2)))
    assert mask.tolist() == [True, False] * 5
    assert state.update_count[0] == 5


def test_fast_forward_always_update_equals_plain_rollout():
    params = _skip_params("gru", 4, hidden=(3, 2))
    seq = np.random.default_rng(5).standard_normal((12, 2))
    state, mask = fast_forward(params, seq, SkipPolicy("always_update"))
    assert mask.all()
    t = Tape(record=False)
    p = bind(t, params)
    layers = initial_state(t, params, p, 1).layers
    for x in seq:
        layers = cell_step(t, params, p, layers, x[None])
    for (a, _), (b, _) in zip(state.layers, layers):
        assert np.array_equal(a.value, b.value)


def test_fast_forward_matches_naive_on_random_networks():
    rng = np.random.default_rng(77)
    for k in range(200):
        cell = "lstm" if k % 2 else "gru"
        hidden = tuple(int(h) for h in rng.integers(1, 5, size=rng.integers(1, 3)))
        params = _skip_params(cell, 1000 + k, hidden=hidden, gate_bias=rng.uniform(-3, 1))
        seq = rng.standard_normal((int(rng.integers(1, 40)), 2))
        fast_state, fast_mask = fast_forward(params, seq)
        naive_state, naive_mask = _naive_mask(params, seq)
        assert np.array_equal(fast_mask, naive_mask), k
        for (hf, cf), (hn, cn) in zip(fast_state.layers, naive_state.layers):
            assert np.array_equal(hf.value, hn.value), k
            if cf is not None:
                assert np.array_equal(cf.value, cn.value), k
        assert fast_state.update_count[0] == naive_state.update_count[0]


def test_fast_forward_rejects_bernoulli():
    params = _skip_params("lstm", 0)
    with pytest.raises(ConfigurationError):
        fast_forward(params, np.zeros((4, 2)), SkipPolicy(binarizer="bernoulli"))


# -- random skip baseline ----------------------------------------------------------


def test_random_skip_zero_probability_is_plain_rollout():
    params = init_params("lstm", 1, (3,), np.random.default_rng(0), skip=False)
    x = np.random.default_rng(1).standard_normal((2, 15, 1))
    t = Tape(record=False)
    p = bind(t, params)
    a = rollout(t, params, p, x, SkipPolicy("random", 0.0), rng=np.random.default_rng(2))
    b = rollout(t, params, p, x, SkipPolicy("always_update"))
    assert a.mask.all()
    assert np.array_equal(a.state.layers[0][0].value, b.state.layers[0][0].value)


def test_random_skip_half_uses_half_of_mnist_length():
    params = init_params("gru", 1, (2,), np.random.default_rng(0), skip=False)
    x = np.zeros((128, 784, 1))
    means = []
    for run in range(4):
        t = Tape(record=False)
        ro = rollout(t, params, bind(t, params), x, SkipPolicy("random", 0.5), rng=np.random.default_rng(run))
        means.append(ro.state.update_count.mean())
        assert np.array_equal(ro.state.update_count, ro.mask.sum(axis=1))
    assert abs(np.mean(means) - 392) <= 1.0


def test_random_skip_copy_fidelity():
    params = init_params("lstm", 1, (3,), np.random.default_rng(0), skip=False)
    x = np.random.default_rng(1).standard_normal((4, 30, 1))
    t = Tape(record=False)
    p = bind(t, params)
    from skiprnn.cells import random_skip_step

    state = initial_state(t, params, p, 4)
    rng = np.random.default_rng(3)
    for k in range(30):
        nxt = random_skip_step(t, params, p, state, x[:, k], rng, 0.5)
        copied = nxt.u.value[:, 0] == 0
        for (hn, cn), (ho, co) in zip(nxt.layers, state.layers):
            assert np.array_equal(hn.value[copied], ho.value[copied])
            assert np.array_equal(cn.value[copied], co.value[copied])
        state = nxt


@pytest.mark.parametrize("p", [1.0, 1.5, -0.1])
def test_random_skip_probability_validated(p):
    with pytest.raises(ConfigurationError):
        SkipPolicy("random", p)


def test_p_skip_only_for_random_policy():
    with pytest.raises(ConfigurationError):
        SkipPolicy("learned", 0.5)


# -- gate mask ---------------------------------------------------------------------


def test_stack_gate_mask_examples():
    m = stack_gate_mask([256, 256], [1])
    assert m.shape == (512,) and not m[:256].any() and m[256:].all()
    assert stack_gate_mask([110], [0]).all()
    with pytest.raises(ConfigurationError):
        stack_gate_mask([4, 4], [])
    with pytest.raises(ConfigurationError):
        stack_gate_mask([4, 4], [2])


def test_masked_gate_columns_zero_initialized():
    params = init_params("lstm", 1, (4, 5), np.random.default_rng(0), gate_layers=[1])
    assert (params.weights["gate.W"][:4] == 0).all()
    assert (params.weights["gate.W"][4:] != 0).all()


def test_masked_gate_columns_stay_zero_after_training():
    rng = np.random.default_rng(0)
    params = init_params("lstm", 2, (4, 5), rng, gate_layers=[1])
    params.weights["gate.W"][:4] = 0.0
    head = init_readout(rng, 5, 1)
    opt = Adam(lr=1e-2)
    budget = BudgetSpec.cost_per_sample(1e-2)
    for _ in range(100):
        batch = gen_adding(rng, 8, length=10)
        t = Tape()
        p = bind(t, params)
        hp = {k: t.param(k, v) for k, v in head.items()}
        ro = rollout(t, params, p, batch.inputs, SkipPolicy())
        pred = readout(t, hp, ro.state.layers[-1][0])
        loss = task_loss(t, "mse", pred, batch.targets) + budget_loss(t, ro.gates, budget)
        grads = t.backward(loss)
        assert (grads["gate.W"][:4] == 0).all()
        opt.step({**params.weights, **head}, grads)
    assert (params.weights["gate.W"][:4] == 0).all()
    assert (params.weights["gate.W"][4:] != 0).any()


# -- invariants (property tests) ------------------------------------------------------


net_seeds = st.integers(0, 2**31 - 1)


@given(net_seeds, st.sampled_from(["lstm", "gru"]), st.floats(-3, 2))
def test_accumulator_stays_in_unit_interval(seed, cell, bias):
    params = _skip_params(cell, seed, gate_bias=bias)
    x = np.random.default_rng(seed + 1).standard_normal((3, 25, 2))
    t = Tape(record=False)
    ro = rollout(t, params, bind(t, params), x, SkipPolicy(), trace=True)
    assert (ro.u_tilde >= 0).all() and (ro.u_tilde <= 1).all()
    assert (ro.u_tilde[:, 0] == 1.0).all()
    assert 0 <= ro.state.u_tilde.value.min() and ro.state.u_tilde.value.max() <= 1


@given(net_seeds, st.sampled_from(["lstm", "gru"]), st.floats(-3, 1))
def test_copy_fidelity_and_monotone_trigger(seed, cell, bias):
    params = _skip_params(cell, seed, hidden=(2, 3), gate_bias=bias)
    x = np.random.default_rng(seed + 1).standard_normal((3, 20, 2))
    t = Tape(record=False)
    p = bind(t, params)
    state = initial_state(t, params, p, 3)
    for k in range(20):
        nxt = skip_step(t, params, p, state, x[:, k])
        copied = nxt.u.value[:, 0] == 0.0
        for (hn, cn), (ho, co) in zip(nxt.layers, state.layers):
            assert np.array_equal(hn.value[copied], ho.value[copied])
            if cn is not None:
                assert np.array_equal(cn.value[copied], co.value[copied])
        # while copying, the accumulator never decreases
        assert (nxt.u_tilde.value[copied] >= state.u_tilde.value[copied]).all()
        # the refill is reused unchanged on copy steps
        if state.delta_u is not None:
            np.testing.assert_array_equal(nxt.delta_u.value[copied], state.delta_u.value[copied])
        state = nxt


@given(net_seeds, st.sampled_from(["lstm", "gru"]), st.floats(-3, 1))
def test_gate_skip_equivalence(seed, cell, bias):
    params = _skip_params(cell, seed, gate_bias=bias)
    seq = np.random.default_rng(seed).standard_normal((30, 2))
    t = Tape(record=False)
    p = bind(t, params)
    state = initial_state(t, params, p, 1)
    used, deltas = [], []
    for x in seq:
        state = skip_step(t, params, p, state, x[None])
        used.append(state.u.value[0, 0] == 1.0)
        deltas.append(state.delta_u.value[0, 0])
    implied = np.zeros(30, dtype=bool)
    k = 0
    while k < 30:
        implied[k] = True
        k += n_skip(deltas[k]) + 1
    assert np.array_equal(implied, np.array(used))


@given(net_seeds, st.sampled_from(["lstm", "gru"]))
def test_always_update_equals_plain_cell(seed, cell):
    params = _skip_params(cell, seed, hidden=(3, 2))
    x = np.random.default_rng(seed).standard_normal((2, 10, 2))
    t = Tape(record=False)
    p = bind(t, params)
    ro = rollout(t, params, p, x, SkipPolicy("always_update"))
    layers = initial_state(t, params, p, 2).layers
    for k in range(10):
        layers = cell_step(t, params, p, layers, x[:, k])
    for (a, _), (b, _) in zip(ro.state.layers, layers):
        assert np.array_equal(a.value, b.value)
    assert (ro.state.update_count == 10).all()


def test_learned_policy_requires_gate():
    params = init_params("lstm", 1, (2,), np.random.default_rng(0), skip=False)
    t = Tape(record=False)
    with pytest.raises(ConfigurationError):
        rollout(t, params, bind(t, params), np.zeros((1, 3, 1)), SkipPolicy())


# -- checkpoints ---------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    params = _skip_params("lstm", 3, hidden=(3, 4), gate_layers=[1])
    policy = SkipPolicy("learned", binarizer="bernoulli")
    extra = {"head.W": np.arange(4.0).reshape(4, 1)}
    path = tmp_path / "w.skrn"
    save_checkpoint(path, params, policy, extra)
    loaded, pol, ex = load_checkpoint(path)
    assert pol == policy
    assert loaded.cell == "lstm" and loaded.hidden_sizes == (3, 4) and loaded.gate_layers == (1,)
    assert loaded.weights.keys() == params.weights.keys()
    for k in params.weights:
        assert np.array_equal(loaded.weights[k], params.weights[k])
    assert np.array_equal(ex["head.W"], extra["head.W"])
    raw = path.read_bytes()
    assert raw[:4] == b"SKRN" and int.from_bytes(raw[4:8], "little") == 1


def test_checkpoint_rejects_garbage(tmp_path):
    bad = tmp_path / "bad"
    bad.write_bytes(b"NOPE" + b"\0" * 16)
    with pytest.raises(DataError):
        load_checkpoint(bad)
    params = _skip_params("gru", 0)
    good = tmp_path / "good"
    save_checkpoint(good, params, SkipPolicy())
    trunc = tmp_path / "trunc"
    trunc.write_bytes(good.read_bytes()[:-8])
    with pytest.raises(DataError):
        load_checkpoint(trunc)


def test_params_copy_is_independent():
    params = _skip_params("lstm", 0)
    clone = params.copy()
    clone.weights["gate.b"][:] = 5.0
    assert params.weights["gate.b"][0, 0] != 5.0
