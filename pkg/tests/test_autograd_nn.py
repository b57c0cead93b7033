import json

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import random_instance
from nedmp import autograd as ag
from nedmp.nn import (
    GRU,
    MLP,
    Adam,
    CheckpointError,
    GRUSpec,
    MLPSpec,
    ParamStore,
    PlateauSchedule,
    early_stop,
    gru_forward,
    load_checkpoint,
    mlp_forward,
    save_checkpoint,
)


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f()
        x[idx] = old - h
        down = f()
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def check_op(op, *shapes, seed=0, lo=-1.0, hi=1.0, rtol=1e-5, atol=1e-8):
    """Gradient of ``sum(op(*inputs) * weights)`` against central differences."""
    rng = np.random.default_rng(seed)
    xs = [ag.Tensor(rng.uniform(lo, hi, size=s), requires_grad=True) for s in shapes]
    out_shape = op(*xs).shape
    w = rng.normal(size=out_shape)

    def value():
        with ag.no_grad():
            return float(np.sum(op(*xs).value * w))

    loss = ag.sum(op(*xs) * w)
    ag.backward(loss)
    for x in xs:
        assert np.allclose(x.grad, numeric_grad(value, x.value), rtol=rtol, atol=atol)


# --- primitives --------------------------------------------------------------


def test_square_gradient():
    w = ag.Tensor(np.array(3.0), requires_grad=True)
    ag.backward(w * w)
    assert w.grad == 6.0


def test_softmax_cross_entropy_gradient():
    logits = ag.Tensor(np.array([[1.0, -0.5, 2.0], [0.1, 0.2, 0.3]]), requires_grad=True)
    onehot = np.array([[0, 0, 1.0], [1.0, 0, 0]])
    p = ag.softmax(logits)
    loss = ag.sum(ag.log(p) * onehot) * -1.0
    ag.backward(loss)
    assert np.allclose(logits.grad, p.value - onehot, atol=1e-12)


def test_gradients_accumulate():
    w = ag.Tensor(np.array([2.0]), requires_grad=True)
    ag.backward(ag.sum(w * w))
    ag.backward(ag.sum(w * w))
    assert w.grad.tolist() == [8.0]


def test_backward_needs_recorded_scalar():
    with pytest.raises(RuntimeError):
        ag.backward(ag.constant(np.array(1.0)))
    w = ag.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        ag.backward(w * w)
    with ag.no_grad():
        loss = ag.sum(w * w)
    with pytest.raises(RuntimeError):
        ag.backward(loss)


def test_ndarray_times_tensor_stays_a_tensor():
    w = ag.Tensor(np.ones(3), requires_grad=True)
    out = np.arange(3.0) * w
    assert isinstance(out, ag.Tensor)
    ag.backward(ag.sum(out))
    assert w.grad.tolist() == [0.0, 1.0, 2.0]


@pytest.mark.parametrize(
    "op, shapes",
    [
        (lambda a, b: a + b, [(3, 4), (4,)]),
        (lambda a, b: a - b, [(3, 4), (3, 1)]),
        (lambda a, b: a * b, [(3, 4), (3, 4)]),
        (lambda a: -a, [(5,)]),
        (lambda a, b: a @ b, [(3, 4), (4, 2)]),
        (ag.relu, [(4, 5)]),
        (ag.sigmoid, [(4, 5)]),
        (ag.tanh, [(4, 5)]),
        (ag.softmax, [(4, 3)]),
        (lambda a: ag.clip(a, -0.5, 0.5), [(20,)]),
        (lambda a, b: ag.minimum(a, b), [(20,), (20,)]),
        (lambda a: ag.relu_sum(a), [(12,)]),
        (lambda x, W, b: ag.linear(x, W, b), [(3, 4), (4, 2), (2,)]),
        (lambda a, b: ag.concat([a, b], axis=1), [(3, 2), (3, 4)]),
        (lambda a, b: ag.concat([a, b], axis=0), [(2, 3), (4, 3)]),
        (lambda a: ag.take(a, np.array([0, 2, 2, 1])), [(3, 2)]),
        (lambda a: ag.column(a, 1), [(4, 3)]),
        (lambda a, b: ag.stack_columns([a, b]), [(5,), (5,)]),
        (lambda a, b: ag.stack([a, b], axis=0), [(2, 3), (2, 3)]),
        (lambda a: ag.getitem(a, (slice(1, None), slice(None), 0)), [(3, 2, 2)]),
        (lambda a: ag.reshape(a, (6, 1)), [(2, 3)]),
    ],
)
def test_primitive_gradients(op, shapes):
    check_op(op, *shapes)


def test_log_gradient():
    check_op(lambda a: ag.log(a, floor=1e-12), (6,), lo=0.1, hi=1.0)


def test_spmm_gradient():
    A = sp.random(5, 4, density=0.5, random_state=1, format="csr")
    check_op(lambda x: ag.spmm(A, x), (4, 3))


def test_gru_cell_gradient():
    check_op(ag.gru_cell, (3, 2), (3, 4), (2, 12), (4, 12), (12,))


def test_product_gradients_with_zeros():
    rng = np.random.default_rng(3)
    g = random_instance("erdos_renyi", 6, rng).graph
    plan = g.products
    for op in (lambda t: ag.node_prod(t, plan), lambda t: ag.cavity_prod(t, plan)):
        theta = ag.Tensor(rng.uniform(0.2, 1.0, size=g.num_edges), requires_grad=True)
        theta.value[[0, 3]] = 0.0
        w = rng.normal(size=g.n if op(theta).shape[0] == g.n else g.num_edges)
        ag.backward(ag.sum(op(theta) * w))

        def value():
            with ag.no_grad():
                return float(np.sum(op(theta).value * w))

        # products are multilinear, so central differences are exact up to rounding
        assert np.allclose(theta.grad, numeric_grad(value, theta.value), atol=1e-8)


# --- MLP and GRU -------------------------------------------------------------


def test_zero_weight_mlp_outputs_bias():
    params = ParamStore()
    spec = MLPSpec(3, (4,), 2)
    MLP.create(params, "f", spec, np.random.default_rng(0))
    params["f.w0"].value[:] = 0
    params["f.w1"].value[:] = 0
    params["f.b1"].value[:] = [0.25, -1.5]
    out = mlp_forward(spec, params, np.ones((5, 3)), "f")
    assert np.array_equal(out.value, np.tile([0.25, -1.5], (5, 1)))


def test_softmax_of_zero_logits():
    params = ParamStore()
    spec = MLPSpec(2, (3,), 3, "softmax")
    MLP.create(params, "f", spec, np.random.default_rng(0))
    params["f.w1"].value[:] = 0
    out = mlp_forward(spec, params, np.ones((1, 2)), "f")
    assert np.allclose(out.value, 1 / 3, atol=1e-15)


def test_mlp_matches_hand_chain():
    rng = np.random.default_rng(4)
    params = ParamStore()
    spec = MLPSpec(3, (5,), 2, "sigmoid")
    MLP.create(params, "f", spec, rng)
    for name in ("f.b0", "f.b1"):
        params[name].value[:] = rng.normal(size=params[name].value.shape)
    x = rng.normal(size=(4, 3))
    W0, b0, W1, b1 = (params[k].value for k in ("f.w0", "f.b0", "f.w1", "f.b1"))
    hidden = np.maximum(x @ W0 + b0, 0)
    expected = 1 / (1 + np.exp(-(hidden @ W1 + b1)))
    assert np.allclose(mlp_forward(spec, params, x, "f").value, expected, atol=1e-14)


def test_mlp_shape_error():
    params = ParamStore()
    spec = MLPSpec(3, (4,), 2)
    MLP.create(params, "f", spec, np.random.default_rng(0))
    with pytest.raises(ValueError):
        mlp_forward(spec, params, np.ones((2, 4)), "f")


def test_gru_zero_weights():
    params = ParamStore()
    spec = GRUSpec(2, 3)
    GRU.create(params, "g", spec, np.random.default_rng(0))
    for k in ("g.W", "g.U", "g.b"):
        params[k].value[:] = 0
    h = np.array([[1.0, -2.0, 0.5]])
    out = gru_forward(spec, params, np.ones((1, 2)), h, "g")
    assert np.allclose(out.value, 0.5 * h)
    GRU.create(params2 := ParamStore(), "g", spec, np.random.default_rng(1))
    assert np.array_equal(gru_forward(spec, params2, np.zeros((1, 2)), np.zeros((1, 3)), "g").value, np.zeros((1, 3)))


def test_gru_matches_gate_equations():
    rng = np.random.default_rng(5)
    params = ParamStore()
    spec = GRUSpec(2, 3)
    GRU.create(params, "g", spec, rng)
    params["g.b"].value[:] = rng.normal(size=9)
    x, h = rng.normal(size=(4, 2)), rng.normal(size=(4, 3))
    W, U, b = params["g.W"].value, params["g.U"].value, params["g.b"].value
    s = lambda v: 1 / (1 + np.exp(-v))  # noqa: E731
    z = s(x @ W[:, 0:3] + h @ U[:, 0:3] + b[0:3])
    r = s(x @ W[:, 3:6] + h @ U[:, 3:6] + b[3:6])
    c = np.tanh(x @ W[:, 6:9] + (r * h) @ U[:, 6:9] + b[6:9])
    expected = (1 - z) * h + z * c
    assert np.allclose(gru_forward(spec, params, x, h, "g").value, expected, atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=6))
def test_softmax_and_sigmoid_ranges(logits):
    x = ag.constant(np.array([logits]))
    assert abs(ag.softmax(x).value.sum() - 1.0) <= 1e-12
    s = ag.sigmoid(ag.constant(np.array(logits) / 5)).value
    assert np.all((s > 0) & (s < 1))


# --- ParamStore, optimiser, schedules, checkpoints ----------------------------


def test_param_store_zero_grads_and_flat():
    params = ParamStore()
    MLP.create(params, "f", MLPSpec(2, (3,), 1), np.random.default_rng(0))
    assert list(params) == ["f.w0", "f.b0", "f.w1", "f.b1"]
    assert params.num_weights() == 2 * 3 + 3 + 3 + 1
    for _, t in params.items():
        t.grad = t.grad + 1.0
    params.zero_grads()
    assert all(np.all(t.grad == 0) and t.grad.shape == t.value.shape for _, t in params.items())
    flat = params.get_flat()
    params.set_flat(flat * 2)
    assert np.array_equal(params.get_flat(), flat * 2)


def test_adam_first_step():
    params = ParamStore()
    w = params.add("w", np.array([1.0, -1.0, 0.5]))
    w.grad = np.array([0.3, -2.0, 1e-3])
    Adam(params, lr=0.01).step()
    # bias-corrected first step: m_hat = g, v_hat = g^2, so delta = -lr g / (|g| + eps)
    g = np.array([0.3, -2.0, 1e-3])
    expected = np.array([1.0, -1.0, 0.5]) - 0.01 * g / (np.abs(g) + 1e-8)
    assert np.allclose(w.value, expected, atol=1e-15)


def test_plateau_schedule():
    s = PlateauSchedule(lr=0.01, factor=0.5, patience=5, min_lr=1e-5)
    for v in [1.0, 0.9, 0.8, 0.7]:
        assert s.step(v) == 0.01
    for _ in range(4):
        assert s.step(0.7) == 0.01
    assert s.step(0.7) == 0.005
    for _ in range(100):
        s.step(1.0)
    assert s.lr == 1e-5


def test_early_stop():
    history = [1.0] + [1.0 + k for k in range(1, 15)]
    assert not early_stop(history, 15)
    history.append(3.0)
    assert len(history) - 1 == 15 and early_stop(history, 15)
    assert not early_stop([5, 4, 3, 2, 1], 15)
    assert not early_stop([], 15)


def test_checkpoint_round_trip(tmp_path):
    params = ParamStore()
    MLP.create(params, "f", MLPSpec(2, (3,), 1), np.random.default_rng(0))
    save_checkpoint(tmp_path / "c.json", params, {"seed": 3, "model_kind": "x"})
    meta, state = load_checkpoint(tmp_path / "c.json")
    assert meta == {"seed": 3, "model_kind": "x"}
    other = ParamStore()
    MLP.create(other, "f", MLPSpec(2, (3,), 1), np.random.default_rng(9))
    other.load_state(state)
    assert np.array_equal(other.get_flat(), params.get_flat())
    doc = json.loads((tmp_path / "c.json").read_text())
    assert doc["params"]["f.w0"]["shape"] == [2, 3]


def test_checkpoint_errors(tmp_path):
    params = ParamStore()
    MLP.create(params, "f", MLPSpec(2, (3,), 1), np.random.default_rng(0))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{}")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.json")
    wrong = ParamStore()
    MLP.create(wrong, "f", MLPSpec(2, (4,), 1), np.random.default_rng(0))
    with pytest.raises(CheckpointError):
        params.load_state(wrong.state())
