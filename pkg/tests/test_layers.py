import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fgnn.layers import (Conv1dLayer, DenseLayer, FgnConv1dLayer, FgnDenseLayer, Network,
                         conv1d_forward, conv_output_length, dense_forward, fgn_dense_forward,
                         gate, gaussian_component)
from conftest import rel_err


def zero_line_neuron(activation="tanh"):
    return DenseLayer(2, 1, activation, weights=[[-1.0, -2.0]], bias=[5.0])


# -- dense ------------------------------------------------------------------

def test_dense_zero_line_and_origin():
    layer = zero_line_neuron()
    assert dense_forward(layer, [1.0, 2.0])[0] == 0.0
    assert dense_forward(layer, [0.0, 0.0])[0] == pytest.approx(np.tanh(5.0), abs=1e-15)
    assert dense_forward(layer, [0.0, 0.0])[0] == pytest.approx(0.99991, abs=1e-5)


def test_dense_identity_map(rng):
    layer = DenseLayer(4, 4, "identity", weights=np.eye(4), bias=np.zeros(4))
    x = rng.normal(size=4)
    np.testing.assert_array_equal(dense_forward(layer, x), x)


def test_dense_dimension_checks():
    with pytest.raises(ValueError):
        dense_forward(zero_line_neuron(), [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        DenseLayer(2, 3, weights=np.zeros((3, 2)), bias=np.zeros(2))
    with pytest.raises(ValueError):
        DenseLayer(2, 3, "sigmoid")


# -- gaussian component --------------------------------------------------------

def test_gaussian_component_examples():
    assert gaussian_component([1.0, 2.0], [1.0, 2.0], 5.0) == 1.0
    x = np.array([3.0, 4.0])       # ||x||^2 = 25 = sigma^2
    assert gaussian_component(x, [0.0, 0.0], 5.0) == pytest.approx(np.exp(-1.0), rel=1e-10)


def test_gaussian_component_monotone_along_rays(rng):
    c = np.array([1.0, 2.0])
    for _ in range(20):
        d = rng.normal(size=2)
        d /= np.linalg.norm(d)
        vals = [gaussian_component(c + t * d, c, 5.0) for t in np.linspace(0, 30, 40)]
        assert vals[0] == 1.0
        assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_gaussian_component_rejects_non_finite():
    with pytest.raises(ValueError):
        gaussian_component([np.nan, 0.0], [0.0, 0.0])
    with pytest.raises(ValueError):
        gaussian_component([0.0], [0.0, 0.0])


def test_gaussian_underflows_to_exact_zero():
    assert gaussian_component([1e3, 0.0], [0.0, 0.0], 1.0) == 0.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3),
       st.lists(st.floats(-10, 10), min_size=3, max_size=3), st.floats(0.1, 20))
def test_gaussian_component_range(x, c, sigma):
    g = gaussian_component(x, c, sigma)
    assert 0.0 <= g <= 1.0
    if x == c:
        assert g == 1.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=4, max_size=4),
       st.lists(st.floats(-5, 5), min_size=4, max_size=4), st.floats(0.5, 10))
def test_spherical_equals_equal_diagonal(x, c, sigma):
    a = gaussian_component(x, c, sigma)
    b = gaussian_component(x, c, np.full(4, sigma), variance="diagonal")
    assert a == pytest.approx(b, rel=1e-12, abs=1e-300)


def test_full_covariance_matches_mahalanobis(rng):
    L = rng.normal(size=(3, 3))
    x, c = rng.normal(size=3), rng.normal(size=3)
    cov = L @ L.T + 1e-12 * np.eye(3)
    expected = np.exp(-(x - c) @ np.linalg.solve(cov, x - c))
    assert gaussian_component(x, c, L, variance="full") == pytest.approx(expected, rel=1e-8)


def test_full_covariance_is_psd(rng):
    layer = FgnDenseLayer(4, 3, variance="full", sigma=rng.normal(size=(3, 4, 4)))
    for cov in layer.covariance():
        assert np.all(np.linalg.eigvalsh(cov) >= 0)


def test_p_norm_uses_unrooted_power():
    x, c = np.array([2.0, -1.0]), np.zeros(2)
    expected = np.exp(-(2.0 ** 3 + 1.0) / 4.0)
    assert gaussian_component(x, c, 2.0, p_norm=3.0) == pytest.approx(expected, rel=1e-12)


def test_variance_floor_keeps_sigma_squared_positive():
    layer = FgnDenseLayer(2, 2, sigma=[0.0, 0.0])
    assert np.all(layer.sigma_squared() > 0)


# -- FGN dense ------------------------------------------------------------------

def paper_fgn(coupled=True):
    return FgnDenseLayer(2, 1, "tanh", weights=[[-1.0, -2.0]], bias=[5.0],
                         centers=[[1.0, 2.0]], sigma=[5.0], coupled=coupled)


def test_fgn_dense_examples():
    y, g = fgn_dense_forward(paper_fgn(), [1.0, 2.0])
    assert y[0] == 0.0 and g[0] == 1.0
    y, g = fgn_dense_forward(paper_fgn(), [0.3, -0.7], gate_in=0.0)
    np.testing.assert_array_equal(y, [0.0])
    np.testing.assert_array_equal(g, [0.0])


def test_fgn_dense_is_classical_times_gaussian(rng):
    layer = FgnDenseLayer(3, 4, "tanh", seed=3, sigma0=2.0)
    layer.C[...] = rng.normal(size=(4, 3))
    layer.b[...] = rng.normal(size=4)
    x = rng.normal(size=3)
    y, g = fgn_dense_forward(layer, x, gate_in=0.7)
    expect_g = 0.7 * np.exp(-np.sum((x - layer.C) ** 2, 1) / layer.sigma_squared())
    np.testing.assert_allclose(g, expect_g, rtol=1e-12)
    np.testing.assert_allclose(y, np.tanh(layer.W @ x + layer.b) * expect_g, rtol=1e-12)


def test_coupled_linear_part_passes_through_center(rng):
    layer = FgnDenseLayer(3, 2, "identity", seed=0, coupled=True, sigma0=1e9)
    layer.C[...] = rng.normal(size=(2, 3))
    y, _ = fgn_dense_forward(layer, layer.C[0])
    assert abs(y[0]) < 1e-12


def test_variance_limit_matches_dense(rng):
    W, b = rng.normal(size=(4, 3)), rng.normal(size=4)
    C = rng.normal(size=(4, 3))
    xs = rng.uniform(-3, 3, (50, 3))
    far = max(np.linalg.norm(x - c) for x in xs for c in C)
    classic = DenseLayer(3, 4, "tanh", weights=W, bias=b)
    fgn = FgnDenseLayer(3, 4, "tanh", weights=W, bias=b, centers=C, sigma=np.full(4, 1e6 * far))
    for x in xs:
        np.testing.assert_allclose(fgn_dense_forward(fgn, x)[0], dense_forward(classic, x), atol=1e-6)


def _fgn_param_grads(layer, x):
    """Autodiff gradient of the single output neuron with respect to W, C and sigma."""
    net = Network([layer], (layer.in_dim,))
    c = net.compiled
    out = c.graph.sum(c.logits)
    c.graph.forward(net.bindings(x[None]))
    grads = c.graph.backward(out, wrt=[c.params["0.W"], c.params["0.C"], c.params["0.sigma"]])
    return [grads[c.params[k]].grad for k in ("0.W", "0.C", "0.sigma")]


@pytest.mark.parametrize("activation", ["tanh", "relu", "identity"])
def test_parameter_gradients_match_closed_forms(activation):
    rng = np.random.default_rng(7)
    for _ in range(50):
        n = rng.integers(1, 6)
        W, b, C = rng.normal(size=(1, n)), rng.normal(size=1), rng.normal(size=(1, n))
        sigma = rng.uniform(0.5, 3.0, 1)
        x = C[0] + rng.normal(scale=0.7, size=n)
        layer = FgnDenseLayer(n, 1, activation, weights=W, bias=b, centers=C, sigma=sigma)
        gW, gC, gS = _fgn_param_grads(layer, x)
        ell = W[0] @ x + b[0]
        phi = {"tanh": np.tanh, "relu": lambda v: max(v, 0.0), "identity": lambda v: v}[activation](ell)
        dphi = {"tanh": 1 - np.tanh(ell) ** 2, "relu": float(ell > 0), "identity": 1.0}[activation]
        s2 = sigma[0] ** 2
        d2 = np.sum((x - C[0]) ** 2)
        g = np.exp(-d2 / s2)
        assert rel_err(gW[0], x * dphi * g) <= 1e-6
        assert rel_err(gC[0], phi * 2 * (x - C[0]) / s2 * g) <= 1e-6
        assert rel_err(gS[0], phi * 2 * d2 / sigma[0] ** 3 * g) <= 1e-6


def test_no_gradient_from_inputs_with_underflowed_gate():
    layer = FgnDenseLayer(2, 1, "tanh", weights=[[1.0, 1.0]], bias=[0.3], sigma=[1.0])
    for grad in _fgn_param_grads(layer, np.array([100.0, -80.0])):
        assert np.all(grad == 0.0)


# -- gate and network -------------------------------------------------------------

def test_gate_examples():
    assert gate([]) == 1.0
    assert gate([0.0, 0.0, 0.0]) == 0.0
    assert gate([0.2, 0.9, 0.5]) == 0.9


def test_far_inputs_give_zero_logits(fgn_net, rng):
    z = fgn_net.logits(rng.normal(size=(20, 5)) * 1e6)
    assert np.all(np.abs(z) < 1e-6)


def test_classical_network_matches_plain_feed_forward(classic_net, rng):
    x = rng.normal(size=(7, 5))
    h = x
    for layer in classic_net.layers:
        h = h @ layer.W.T + layer.b
        h = {"tanh": np.tanh, "relu": lambda v: np.maximum(v, 0), "identity": lambda v: v}[layer.activation](h)
    np.testing.assert_allclose(classic_net.logits(x), h, rtol=1e-12, atol=1e-14)
    np.testing.assert_array_equal(classic_net.forward(x).final_gate, np.ones(7))


def test_classical_layers_pass_gate_through(rng):
    layers = [FgnDenseLayer(3, 4, "tanh", sigma0=1.0, seed=0), DenseLayer(4, 4, "tanh", seed=1),
              FgnDenseLayer(4, 2, "identity", sigma0=1e9, seed=2)]
    net = Network(layers, (3,))
    res = net.forward(rng.normal(size=(5, 3)))
    np.testing.assert_allclose(np.max(res.layer_g[2], axis=1), np.max(res.layer_g[0], axis=1), rtol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 5.0))
def test_gate_monotone_through_depth(seed, scale):
    rng = np.random.default_rng(seed)
    layers = [FgnDenseLayer(4, 6, "tanh", sigma0=rng.uniform(0.5, 3), seed=seed),
              FgnDenseLayer(6, 5, "relu", sigma0=rng.uniform(0.5, 3), seed=seed + 1),
              FgnDenseLayer(5, 3, "identity", sigma0=rng.uniform(0.5, 3), seed=seed + 2)]
    for l in layers:
        l.C[...] = rng.normal(size=l.C.shape)
    res = Network(layers, (4,)).forward(rng.normal(scale=scale, size=(30, 4)))
    maxima = [np.max(g, axis=1) for g in res.layer_g]
    for prev, cur in zip(maxima, maxima[1:]):
        assert np.all(cur <= prev)


def test_network_rejects_bad_chaining():
    with pytest.raises(ValueError, match="expects 4 inputs"):
        Network([DenseLayer(3, 5), DenseLayer(4, 2)], (3,))


# -- convolutions ---------------------------------------------------------------

def test_conv_output_length_examples():
    assert conv_output_length(100, 3, 1, 1) == 98
    assert conv_output_length(16000, 80, 16, 1) == 996
    with pytest.raises(ValueError):
        conv_output_length(4, 3, 1, 2)


def test_conv_box_filter():
    layer = Conv1dLayer(1, 1, 3, 1, 1, "identity", weights=[[[1.0, 1.0, 1.0]]], bias=[0.0])
    np.testing.assert_array_equal(conv1d_forward(layer, np.ones(10)), np.full((1, 8), 3.0))


def brute_force_conv(x, W, b, C, sigma, s, d, activation, fgn):
    """Per-window loop: each output channel is one (FGN) neuron applied to the window."""
    in_ch, n = x.shape
    out_ch, _, k = W.shape
    L = (n - d * (k - 1) - 1) // s + 1
    y = np.zeros((out_ch, L))
    for o in range(out_ch):
        for i in range(L):
            z = np.array([x[c, i * s + j * d] for c in range(in_ch) for j in range(k)])
            v = float(W[o].ravel() @ z + b[o])
            v = {"tanh": np.tanh(v), "relu": max(v, 0.0), "identity": v}[activation]
            if fgn:
                v *= np.exp(-np.sum((z - C[o]) ** 2) / (sigma[o] ** 2 + 1e-12))
            y[o, i] = v
    return y


@pytest.mark.parametrize("fgn", [False, True])
def test_conv_matches_brute_force_over_grid(fgn):
    rng = np.random.default_rng(11)
    for n, k, s, d in itertools.product([9, 17, 64], [1, 2, 5], [1, 2, 3], [1, 2, 4]):
        if n < d * (k - 1) + 1:
            continue
        in_ch, out_ch = 2, 3
        x = rng.normal(size=(in_ch, n))
        if fgn:
            layer = FgnConv1dLayer(in_ch, out_ch, k, s, d, "tanh", seed=n + k, sigma0=2.5)
            layer.C[...] = rng.normal(size=layer.C.shape)
        else:
            layer = Conv1dLayer(in_ch, out_ch, k, s, d, "tanh", seed=n + k)
        layer.b[...] = rng.normal(size=out_ch)
        y = conv1d_forward(layer, x)
        assert y.shape == (out_ch, conv_output_length(n, k, s, d))
        oracle = brute_force_conv(x, layer.W, layer.b, getattr(layer, "C", None),
                                  getattr(layer, "sigma", None), s, d, "tanh", fgn)
        np.testing.assert_allclose(y, oracle, rtol=0, atol=1e-12)


def test_conv_gate_uses_previous_map_maximum(rng):
    a = FgnConv1dLayer(1, 2, 3, 1, 1, "relu", sigma0=1.5, seed=0)
    b = FgnConv1dLayer(2, 2, 3, 2, 1, "relu", sigma0=1e9, seed=1)
    net = Network([a, b], (1, 20))
    res = net.forward(rng.normal(size=(4, 1, 20)))
    m = res.layer_g[0].reshape(4, -1).max(axis=1)
    np.testing.assert_allclose(res.layer_g[1].reshape(4, -1).max(axis=1), m, rtol=1e-9)
