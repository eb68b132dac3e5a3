import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fdcheck import numeric_grad, numeric_grad_array, rel_err
from sftdg.diffmath import (AdamState, DimensionError, ParamSet, Tape, TapeStateError, adam_step,
                            backward, forward)
from sftdg import network


def linear_graph():
    tape = Tape()
    x = tape.input("x")
    logits = tape.add_row(tape.matmul(x, tape.param("W")), tape.param("b"))
    return tape, logits


def test_forward_identity_weights():
    tape, _ = linear_graph()
    params = ParamSet({"W": np.eye(2), "b": np.zeros((1, 2))})
    out = forward(tape, params, [[2.0, 3.0]])
    np.testing.assert_array_equal(out, [[2.0, 3.0]])


@pytest.mark.parametrize("z, expected", [
    ([0.0, 0.0], [0.5, 0.5]),
    ([math.log(1), math.log(3)], [0.25, 0.75]),
])
def test_softmax_examples(z, expected):
    tape = Tape()
    out = tape.softmax(tape.const([z]))
    np.testing.assert_allclose(out.value, [expected], atol=1e-15)


def test_shape_mismatch_names_node():
    tape, _ = linear_graph()
    params = ParamSet({"W": np.eye(3), "b": np.zeros((1, 3))})
    with pytest.raises(DimensionError, match="matmul"):
        forward(tape, params, [[2.0, 3.0]])


def test_backward_square_sum():
    tape = Tape()
    w = tape.param("W", [[1.0, 2.0]])
    loss = tape.sum(tape.mul(w, w))
    grads = tape.backward(loss)
    np.testing.assert_array_equal(grads["W"], [[2.0, 4.0]])


def test_cross_entropy_logit_gradient(rng):
    for _ in range(20):
        z0 = rng.normal(size=(1, 4))
        y = np.eye(4)[[rng.integers(4)]]
        tape = Tape()
        z = tape.param("z", z0)
        loss = -tape.sum(tape.mul(tape.const(y), tape.log(tape.softmax(z))))
        g = tape.backward(loss)["z"]
        e = np.exp(z0 - z0.max())
        np.testing.assert_allclose(g, e / e.sum() - y, atol=1e-12)

        def f(v):
            p = np.exp(v - v.max())
            return -float(np.sum(y * np.log(p / p.sum())))
        assert rel_err(g, numeric_grad_array(f, z0)) < 1e-4


@pytest.mark.parametrize("value, expected", [(2.5, 1.0), (0.0, 0.0), (-1.5, -1.0)])
def test_abs_subgradient(value, expected):
    tape = Tape()
    a = tape.param("a", [[value]])
    grads = tape.backward(tape.abs(a))
    assert grads["a"][0, 0] == expected


def test_backward_before_forward():
    tape, _ = linear_graph()
    with pytest.raises(TapeStateError):
        backward(tape)


def test_seed_shape_checked():
    tape = Tape()
    w = tape.param("W", np.ones((2, 2)))
    with pytest.raises(DimensionError):
        tape.backward(w * 2.0, seed=np.ones((1, 2)))


def test_backward_leaves_tape_unchanged(rng):
    tape = Tape()
    w = tape.param("W", rng.normal(size=(3, 2)))
    x = tape.const(rng.normal(size=(4, 3)))
    loss = tape.sum(tape.softmax(x @ w))
    before = [n.value.copy() for n in tape.nodes]
    tape.backward(loss)
    tape.backward(loss)
    for n, v in zip(tape.nodes, before):
        np.testing.assert_array_equal(n.value, v)


def test_replay_bit_identical(rng):
    tape = Tape()
    x = tape.input("x", rng.normal(size=(5, 2)))
    w = tape.param("W", rng.normal(size=(2, 3)))
    b = tape.param("b", rng.normal(size=(1, 3)))
    out = tape.log(tape.softmax(tape.add_row(x @ w, b)))
    cached = [n.value.copy() for n in tape.nodes]
    tape.replay()
    for n, v in zip(tape.nodes, cached):
        assert np.array_equal(n.value, v)
    assert out.value is tape.nodes[-1].value


# every differentiable primitive against central differences
def _unary(op):
    def build(tape, a, b):
        return tape.sum(tape.mul(getattr(tape, op)(a), tape.const(b_weights(a.value.shape))))
    return build


def b_weights(shape):
    return np.linspace(-1.0, 1.5, int(np.prod(shape))).reshape(shape)


PRIMITIVES = {
    "matmul": (lambda t, a, b: t.sum(t.mul(t.matmul(a, b), t.const(b_weights((3, 3))))), (3, 4), (4, 3)),
    "add": (lambda t, a, b: t.sum(t.mul(a + b, t.const(b_weights((3, 4))))), (3, 4), (3, 4)),
    "sub": (lambda t, a, b: t.sum(t.mul(a - b, t.const(b_weights((3, 4))))), (3, 4), (3, 4)),
    "mul": (lambda t, a, b: t.sum(t.mul(a, b)), (3, 4), (3, 4)),
    "add_row": (lambda t, a, b: t.sum(t.mul(t.add_row(a, b), t.const(b_weights((3, 4))))), (3, 4), (1, 4)),
    "scale": (lambda t, a, b: t.sum(t.mul(t.scale(a, -2.5), b)), (3, 4), (3, 4)),
    "softmax": (lambda t, a, b: t.sum(t.mul(t.softmax(a), b)), (3, 4), (3, 4)),
    "log": (lambda t, a, b: t.sum(t.mul(t.log(t.mul(a, a)), b)), (3, 4), (3, 4)),
    "sum": (lambda t, a, b: t.mul(t.sum(a), t.sum(b)), (3, 4), (2, 2)),
    "mean_rows": (lambda t, a, b: t.mul(t.mean_rows(t.mul(a, a)), t.sum(b)), (3, 4), (1, 1)),
    "abs": (lambda t, a, b: t.sum(t.mul(t.abs(a), b)), (3, 4), (3, 4)),
    "tanh": (lambda t, a, b: t.sum(t.mul(t.tanh(a), b)), (3, 4), (3, 4)),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    build, shape_a, shape_b = PRIMITIVES[name]
    rng = np.random.default_rng(hash(name) % 2**32)
    for _ in range(20):
        params = ParamSet({"a": rng.normal(size=shape_a), "b": rng.normal(size=shape_b)})

        def value(p):
            tape = Tape()
            return float(build(tape, tape.param("a", p["a"]), tape.param("b", p["b"])).value[0, 0])

        tape = Tape()
        out = build(tape, tape.param("a", params["a"]), tape.param("b", params["b"]))
        analytic = tape.backward(out).flatten()
        assert rel_err(analytic, numeric_grad(value, params)) <= 1e-4


@pytest.mark.parametrize("arch", ["linear", "mlp"])
def test_cross_entropy_loss_gradient(arch, rng):
    for _ in range(20):
        params = network.init_params(2, 3, rng, arch=arch, hidden=5, std=0.7)
        x = rng.normal(size=(6, 2))
        t = rng.dirichlet(np.ones(3), size=6)
        _, g = network.cross_entropy(params, x, t)
        num = numeric_grad(lambda p: network.cross_entropy_value(p, x, t), params)
        assert rel_err(g.flatten(), num) <= 1e-4


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
              elements=st.floats(-50, 50)))
def test_softmax_rows_on_simplex(z):
    tape = Tape()
    p = tape.softmax(tape.const(z)).value
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(p >= 0) and np.all(p <= 1)


def test_softmax_entries_open_interval(rng):
    tape = Tape()
    p = tape.softmax(tape.const(rng.normal(scale=3.0, size=(50, 4)))).value
    assert np.all((p > 0) & (p < 1))


@settings(max_examples=50, deadline=None)
@given(st.data())
def test_flatten_unflatten_roundtrip(data):
    shapes = data.draw(st.lists(st.tuples(st.integers(1, 4), st.integers(1, 4)), min_size=1, max_size=4))
    ps = ParamSet({f"p{i}": np.zeros(s) for i, s in enumerate(shapes)})
    v = data.draw(arrays(np.float64, ps.size, elements=st.floats(-1e6, 1e6)))
    assert np.array_equal(ps.unflatten(v).flatten(), v)


def test_paramset_immutable():
    ps = ParamSet({"W": np.ones((2, 2))})
    with pytest.raises(ValueError):
        ps["W"][0, 0] = 3.0


def test_paramset_unflatten_wrong_size():
    with pytest.raises(DimensionError):
        ParamSet({"W": np.ones((2, 2))}).unflatten(np.ones(3))


def test_deterministic_graph(rng):
    params = network.init_params(2, 3, np.random.default_rng(5), std=0.5)
    x = np.random.default_rng(6).normal(size=(8, 2))
    t = np.eye(3)[np.arange(8) % 3]
    a = network.cross_entropy(params, x, t)
    b = network.cross_entropy(params, x, t)
    assert a[0] == b[0] and np.array_equal(a[1].flatten(), b[1].flatten())


class TestAdam:
    def test_zero_gradient(self):
        params = ParamSet({"w": [[1.0, -2.0]]})
        state = AdamState.for_params(params, lr=0.1)
        state.m["w"] = np.array([[0.5, 0.5]])
        state.v["w"] = np.array([[0.0, 0.0]])
        grads = ParamSet.zeros_like(params)
        out = adam_step(state, params, grads)
        # m decays but still pushes; with v zero the update is m_hat / eps-dominated,
        # so check decay on a fresh state instead
        fresh = AdamState.for_params(params, lr=0.1)
        same = adam_step(fresh, params, grads)
        np.testing.assert_array_equal(same["w"], params["w"])
        np.testing.assert_allclose(state.m["w"], 0.9 * np.array([[0.5, 0.5]]))
        assert out.shapes() == params.shapes()

    def test_first_step_magnitude(self):
        params = ParamSet({"w": [[0.0, 1.0, -3.0]]})
        state = AdamState.for_params(params, lr=1e-3)
        out = adam_step(state, params, params.map(np.ones_like))
        # m_hat = 1, v_hat = 1, so delta = -lr / (1 + eps)
        np.testing.assert_allclose(out["w"] - params["w"], -1e-3 / (1 + 1e-8), rtol=1e-12)
        assert state.step == 1

    def test_constant_gradient_monotone(self):
        params = ParamSet({"w": [[0.0, 0.0]]})
        g = ParamSet({"w": [[2.0, -0.5]]})
        state = AdamState.for_params(params, lr=0.01)
        p1 = adam_step(state, params, g)
        p2 = adam_step(state, p1, g)
        assert np.all(np.sign(p1["w"] - params["w"]) == -np.sign(g["w"]))
        assert np.all(np.sign(p2["w"] - p1["w"]) == -np.sign(g["w"]))
        assert state.step == 2

    def test_shape_mismatch(self):
        params = ParamSet({"w": [[0.0, 0.0]]})
        state = AdamState.for_params(params, lr=0.01)
        with pytest.raises(DimensionError):
            adam_step(state, params, ParamSet({"w": [[0.0, 0.0, 0.0]]}))
