import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fgnn.autodiff import Graph, GraphError, Tensor
from conftest import central_difference, rel_err


def _scalar(build, x):
    """Evaluate ``build(graph, leaf)`` summed to a scalar, plus its gradient."""
    g = Graph()
    leaf = g.leaf("x")
    out = g.sum(build(g, leaf))
    g.forward({leaf: x})
    return float(out.value), g.backward(out, wrt=[leaf])[leaf].grad


def test_tensor_invariants():
    t = Tensor(np.zeros((2, 3)))
    assert t.shape == (2, 3) and len(t) == 6
    with pytest.raises(ValueError):
        Tensor(np.zeros(3), grad=np.zeros(2))


def test_forward_examples():
    g = Graph()
    x = g.leaf()
    t = g.tanh(x)
    gauss = g.exp(-g.square(x - 1.0))
    g.forward({x: 0.0})
    assert t.value == 0.0
    g.forward({x: 1.0})
    assert gauss.value == 1.0


def test_weighted_sum_on_zero_line():
    g = Graph()
    w, x = g.leaf(), g.leaf()
    ell = g.sum(w * x) + 5.0
    g.forward({w: [-1.0, -2.0], x: [1.0, 2.0]})
    assert ell.value == 0.0


def test_backward_examples():
    _, d = _scalar(lambda g, x: g.tanh(x), np.array(0.0))
    assert d == pytest.approx(1.0)
    _, d = _scalar(lambda g, x: g.exp(-g.square(x)), np.array(1.0))
    assert d == pytest.approx(-2 * np.exp(-1.0), rel=1e-12)


def test_unbound_leaf_and_shape_errors():
    g = Graph()
    a, b = g.leaf("a"), g.leaf("b")
    c = g.matmul(a, b)
    with pytest.raises(GraphError, match="unbound"):
        g.forward({a: np.ones((2, 3))})
    with pytest.raises(GraphError, match=f"node {c.id}"):
        g.forward({a: np.ones((2, 3)), b: np.ones((2, 3))})


def test_non_scalar_seed_rejected():
    g = Graph()
    a = g.leaf()
    y = g.square(a)
    g.forward({a: np.ones(3)})
    with pytest.raises(GraphError, match="not scalar"):
        g.backward(y)


def test_forward_is_bit_identical_on_replay(rng):
    g = Graph()
    a = g.leaf()
    y = g.sum(g.tanh(a @ a.transpose(1, 0)).exp())
    x = rng.normal(size=(4, 3))
    g.forward({a: x})
    first = y.value.copy()
    g.forward({a: x})
    assert y.value.tobytes() == first.tobytes()


def test_fan_out_accumulates():
    # y = x*x + x -> dy/dx = 2x + 1
    _, d = _scalar(lambda g, x: x * x + x, np.array(3.0))
    assert d == pytest.approx(7.0)


def test_random_composite_against_finite_differences(rng):
    W1, W2, W3 = rng.normal(size=(4, 3)), rng.normal(size=(5, 4)), rng.normal(size=(2, 5))

    def build(g, x):
        h = g.tanh(g.matmul(g.const(W1), x))
        h = g.relu(g.matmul(g.const(W2), h) + 0.1)
        return g.log_softmax(g.matmul(g.const(W3), h), axis=0)

    for _ in range(5):
        x = rng.normal(size=(3, 2))
        f = lambda v: _scalar(build, v)[0]
        _, grad = _scalar(build, x)
        assert rel_err(grad, central_difference(f, x)) <= 1e-4


# every operator: (builder, needs |x| >= 1e-3, positive-only domain)
UNARY = {
    "neg": (lambda g, a: -a, False, False),
    "square": (lambda g, a: g.square(a), False, False),
    "exp": (lambda g, a: g.exp(a), False, False),
    "log": (lambda g, a: g.log(a), False, True),
    "tanh": (lambda g, a: g.tanh(a), False, False),
    "relu": (lambda g, a: g.relu(a), True, False),
    "abs_pow": (lambda g, a: g.abs_pow(a, 1.5), True, False),
    "scale": (lambda g, a: a * 2.5, False, False),
    "add_scalar": (lambda g, a: a + 2.5, False, False),
    "sum_axis": (lambda g, a: g.sum(a, axis=1, keepdims=True) * a, False, False),
    "mean": (lambda g, a: g.mean(a, axis=0) * 3.0, False, False),
    "max": (lambda g, a: g.max(a, axis=1), True, False),
    "softmax": (lambda g, a: g.softmax(a, axis=1) * g.const(np.arange(4.0)), False, False),
    "log_softmax": (lambda g, a: g.log_softmax(a, axis=1) * g.const(np.arange(4.0)), False, False),
    "reshape": (lambda g, a: g.reshape(a, (4, 3)) * g.const(np.arange(12.0).reshape(4, 3)), False, False),
    "transpose": (lambda g, a: g.transpose(a, (1, 0)) * g.const(np.arange(12.0).reshape(4, 3)), False, False),
    "take": (lambda g, a: g.take(a, [[0, 3], [1, 1], [2, 0]]) * 1.7, False, False),
    "inv": (lambda g, a: g.inv(g.reshape(g.sum(a, axis=0), (2, 2)) + g.const(np.eye(2) * 8.0)), False, False),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_operator_gradients_at_100_points(name):
    build, nonsmooth, positive = UNARY[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(100):
        x = rng.uniform(-2, 2, size=(3, 4))
        if positive:
            x = np.abs(x) + 0.1
        if nonsmooth:
            x = np.where(np.abs(x) < 1e-3, 1e-3, x)
            if name == "max":
                x += np.arange(4) * 1e-2   # keep the row maximum unique under the probe step
        f = lambda v: _scalar(build, v)[0]
        _, grad = _scalar(build, x)
        assert rel_err(grad, central_difference(f, x)) <= 1e-4, name


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div", "matmul"])
def test_binary_operator_gradients(op, rng):
    for _ in range(20):
        a = rng.uniform(-2, 2, (3, 3))
        b = rng.uniform(0.5, 2, (3, 3)) if op == "div" else rng.uniform(-2, 2, (3, 3))

        def value(av, bv):
            g = Graph()
            x, y = g.leaf(), g.leaf()
            out = g.sum(getattr(g, op)(x, y))
            g.forward({x: av, y: bv})
            grads = g.backward(out)
            return float(out.value), grads[x].grad, grads[y].grad

        _, ga, gb = value(a, b)
        assert rel_err(ga, central_difference(lambda v: value(v, b)[0], a)) <= 1e-4
        assert rel_err(gb, central_difference(lambda v: value(a, v)[0], b)) <= 1e-4


def test_broadcast_gradients_are_unbroadcast(rng):
    g = Graph()
    a, b = g.leaf(), g.leaf()
    out = g.sum(a * b)
    g.forward({a: rng.normal(size=(4, 3)), b: np.array([1.0, 2.0, 3.0])})
    gb = g.backward(out)[b].grad
    assert gb.shape == (3,)
    np.testing.assert_allclose(gb, a.value.sum(axis=0))


def test_nll_gradient_matches_softmax_minus_onehot(rng):
    z = rng.normal(size=(5, 4))
    labels = np.array([0, 3, 1, 1, 2])
    g = Graph()
    zl, yl = g.leaf(), g.leaf()
    loss = g.nll(g.log_softmax(zl, axis=1), yl)
    g.forward({zl: z, yl: labels})
    grad = g.backward(loss, wrt=[zl])[zl].grad
    p = np.exp(z - z.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    np.testing.assert_allclose(grad, (p - np.eye(4)[labels]) / 5, atol=1e-12)


def test_max_ties_go_to_first_index():
    _, d = _scalar(lambda g, x: g.max(x), np.array([1.0, 3.0, 3.0, 2.0]))
    np.testing.assert_array_equal(d, [0, 1, 0, 0])


def test_exp_floor_flushes_to_zero_with_zero_gradient():
    v, d = _scalar(lambda g, x: g.exp(x, floor=-700.0), np.array([-800.0, 0.0]))
    assert v == 1.0
    np.testing.assert_array_equal(d, [0.0, 1.0])


def test_saturated_softmax_is_finite():
    g = Graph()
    z = g.leaf()
    s = g.softmax(z)
    g.forward({z: np.array([1000.0, 0.0])})
    np.testing.assert_allclose(s.value, [1.0, 0.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=8), st.integers(0, 2**31 - 1))
def test_gradient_of_sum_is_sum_of_gradients(values, seed):
    x = np.array(values)
    w = np.random.default_rng(seed).normal(size=x.shape)
    f1 = lambda g, a: g.tanh(a * g.const(w))
    f2 = lambda g, a: g.square(a) * 0.3
    _, d1 = _scalar(f1, x)
    _, d2 = _scalar(f2, x)
    _, d12 = _scalar(lambda g, a: f1(g, a) + f2(g, a), x)
    np.testing.assert_allclose(d12, d1 + d2, rtol=1e-12, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=10), st.floats(-3, 3))
def test_max_subgradient_preserves_mass(values, upstream):
    g = Graph()
    x = g.leaf()
    out = g.max(x) * upstream
    g.forward({x: np.array(values)})
    grad = g.backward(out, wrt=[x])[x].grad
    assert np.sum(grad) == pytest.approx(upstream)
    assert np.count_nonzero(grad) <= 1
