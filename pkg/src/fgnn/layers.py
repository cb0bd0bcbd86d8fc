"""Classical and Finite Gaussian layers, the Gaussian gate, and networks.

Every layer holds its parameters as float64 numpy arrays and knows how to
append its computation to an autodiff :class:`~fgnn.autodiff.Graph`.
A :class:`Network` compiles its layers into one graph once and replays it
for every batch; parameters are bound by reference at each forward, so
in-place optimizer updates are always seen.

Inputs are batch-first: dense layers take ``[B, in]`` and flatten anything
with more axes, 1-D convolutions take ``[B, in_channels, n]`` (a bare
``[B, n]`` is read as one channel).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, Node

__all__ = [
    "ACTIVATIONS", "VARIANCE_KINDS", "SIGMA_FLOOR", "EXP_FLOOR",
    "DenseLayer", "FgnDenseLayer", "Conv1dLayer", "FgnConv1dLayer",
    "Network", "ForwardResult", "conv_output_length", "window_indices",
    "gate", "gaussian_component", "dense_forward", "fgn_dense_forward",
    "conv1d_forward",
]

ACTIVATIONS = ("identity", "tanh", "relu")
VARIANCE_KINDS = ("spherical", "diagonal", "full")

SIGMA_FLOOR = 1e-12
# Gaussian exponents below this are flushed to g == 0 exactly.
EXP_FLOOR = -700.0


def _activate(graph: Graph, node: Node, activation: str) -> Node:
    if activation == "tanh":
        return graph.tanh(node)
    if activation == "relu":
        return graph.relu(node)
    if activation == "identity":
        return node
    raise ValueError(f"unknown activation {activation!r}")


def _check_activation(activation):
    if activation not in ACTIVATIONS:
        raise ValueError(f"activation must be one of {ACTIVATIONS}, got {activation!r}")


def conv_output_length(n: int, kernel_size: int, stride: int = 1, dilation: int = 1) -> int:
    """floor(1 + (n - d(k-1) - 1) / s); raises if the input is shorter than the receptive field."""
    field = dilation * (kernel_size - 1) + 1
    if n < field:
        raise ValueError(f"input length {n} shorter than receptive field {field}")
    return (n - field) // stride + 1


def window_indices(n: int, kernel_size: int, stride: int = 1, dilation: int = 1) -> np.ndarray:
    """Index matrix ``[out_len, k]``: window i, tap j reads input ``i*stride + j*dilation``."""
    out_len = conv_output_length(n, kernel_size, stride, dilation)
    return np.arange(out_len)[:, None] * stride + np.arange(kernel_size)[None, :] * dilation


# ---------------------------------------------------------------------------
# layers

class DenseLayer:
    """Classical fully connected layer: y = phi(x W^T + b)."""

    kind = "dense"
    is_fgn = False

    def __init__(self, in_dim, out_dim, activation="tanh", *, weights=None, bias=None, seed=None):
        _check_activation(activation)
        self.in_dim, self.out_dim = int(in_dim), int(out_dim)
        self.activation = activation
        rng = np.random.default_rng(seed)
        bound = np.sqrt(6.0 / (self.in_dim + self.out_dim))
        self.W = (np.array(weights, dtype=np.float64) if weights is not None
                  else rng.uniform(-bound, bound, (self.out_dim, self.in_dim)))
        self.b = np.array(bias, dtype=np.float64) if bias is not None else np.zeros(self.out_dim)
        if self.W.shape != (self.out_dim, self.in_dim):
            raise ValueError(f"weights shape {self.W.shape} != ({self.out_dim}, {self.in_dim})")
        if self.b.shape != (self.out_dim,):
            raise ValueError(f"bias length {self.b.shape} != weight rows {self.out_dim}")

    def params(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "b": self.b}

    def _linear(self, graph, x, p):
        return x @ graph.transpose(p["W"], (1, 0)) + p["b"]

    def build(self, graph: Graph, x: Node, gate_in: Node | None, p: dict[str, Node]):
        x = graph.reshape(x, (-1, self.in_dim))
        return _activate(graph, self._linear(graph, x, p), self.activation), None

    def __repr__(self):
        return f"{type(self).__name__}({self.in_dim}->{self.out_dim}, {self.activation})"


class _GaussianMixin:
    """Shared variance parameterization for FGN layers.

    ``sigma`` holds raw values whose square is the variance:
    spherical ``[out]``, diagonal ``[out, in]``, full ``[out, in, in]``
    (a factor L with covariance L L^T).
    """

    def _init_gaussian(self, width, centers, sigma, variance, p_norm, sigma0):
        if variance not in VARIANCE_KINDS:
            raise ValueError(f"variance must be one of {VARIANCE_KINDS}, got {variance!r}")
        if not p_norm > 0:
            raise ValueError("p_norm must be positive")
        self.variance = variance
        self.p_norm = float(p_norm)
        out = self.out_dim
        self.C = np.zeros((out, width)) if centers is None else np.array(centers, dtype=np.float64)
        if self.C.shape != (out, width):
            raise ValueError(f"centers shape {self.C.shape} != ({out}, {width})")
        shapes = {"spherical": (out,), "diagonal": (out, width), "full": (out, width, width)}
        if sigma is None:
            if variance == "full":
                sigma = np.broadcast_to(np.eye(width) * sigma0, shapes["full"]).copy()
            else:
                sigma = np.full(shapes[variance], float(sigma0))
        self.sigma = np.array(sigma, dtype=np.float64)
        if self.sigma.shape != shapes[variance]:
            raise ValueError(f"{variance} sigma must have shape {shapes[variance]}, got {self.sigma.shape}")

    def sigma_squared(self) -> np.ndarray:
        """Effective variances: per neuron, per (neuron, dim), or trace(Sigma) per neuron."""
        if self.variance == "full":
            return np.einsum("oij,oij->o", self.sigma, self.sigma) + SIGMA_FLOOR * self.C.shape[1]
        return self.sigma ** 2 + SIGMA_FLOOR

    def covariance(self) -> np.ndarray:
        if self.variance != "full":
            raise ValueError("covariance() is only defined for full variance")
        eye = np.eye(self.C.shape[1])
        return np.matmul(self.sigma, np.swapaxes(self.sigma, -1, -2)) + SIGMA_FLOOR * eye

    def _distance(self, graph: Graph, z: Node, p: dict[str, Node]) -> Node:
        """Scaled distance from rows of ``z [M, width]`` to every center -> ``[M, out]``."""
        width = self.C.shape[1]
        diff = graph.reshape(z, (-1, 1, width)) - p["C"]            # [M, out, width]
        if self.variance == "full":
            sig = p["sigma"]
            cov = sig @ graph.transpose(sig, (0, 2, 1)) + graph.const(SIGMA_FLOOR * np.eye(width))
            prec = graph.inv(cov)                                    # [out, width, width]
            d_t = graph.transpose(diff, (1, 0, 2))                   # [out, B, width]
            quad = graph.sum((d_t @ prec) * d_t, axis=2)             # [out, B]
            return graph.transpose(quad, (1, 0))
        if self.p_norm == 2.0:
            powed = graph.square(diff)
        else:
            powed = graph.abs_pow(diff, self.p_norm)
        var = graph.square(p["sigma"]) + SIGMA_FLOOR
        if self.variance == "diagonal":
            return graph.sum(powed / var, axis=2)
        return graph.sum(powed, axis=2) / var

    def _gaussian(self, graph, z, p):
        return graph.exp(-self._distance(graph, z, p), floor=EXP_FLOOR)


class FgnDenseLayer(_GaussianMixin, DenseLayer):
    """Finite Gaussian dense layer: y = phi(x W^T + b) * g.

    With ``coupled=True`` the bias is not used; the linear part becomes
    ``(x - c) W^T`` so every neuron's zero line passes through its center.
    """

    kind = "fgn-dense"
    is_fgn = True

    def __init__(self, in_dim, out_dim, activation="tanh", *, weights=None, bias=None,
                 centers=None, sigma=None, variance="spherical", p_norm=2.0,
                 sigma0=1.0, coupled=False, seed=None):
        super().__init__(in_dim, out_dim, activation, weights=weights, bias=bias, seed=seed)
        self._init_gaussian(self.in_dim, centers, sigma, variance, p_norm, sigma0)
        self.coupled = bool(coupled)

    def params(self):
        p = {"W": self.W, "C": self.C, "sigma": self.sigma}
        if not self.coupled:
            p["b"] = self.b
        return p

    def effective_bias(self) -> np.ndarray:
        return -np.sum(self.W * self.C, axis=1) if self.coupled else self.b

    def _linear(self, graph, x, p):
        lin = x @ graph.transpose(p["W"], (1, 0))
        if self.coupled:
            return lin - graph.sum(p["W"] * p["C"], axis=1)
        return lin + p["b"]

    def build(self, graph, x, gate_in, p):
        x = graph.reshape(x, (-1, self.in_dim))
        g = self._gaussian(graph, x, p)
        if gate_in is not None:
            g = g * gate_in
        y = _activate(graph, self._linear(graph, x, p), self.activation) * g
        return y, g


class Conv1dLayer:
    """Classical 1-D convolution (valid padding) over ``[B, in_channels, n]`` inputs."""

    kind = "conv1d"
    is_fgn = False

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, dilation=1,
                 activation="relu", *, weights=None, bias=None, seed=None):
        _check_activation(activation)
        if kernel_size < 1 or stride < 1 or dilation < 1:
            raise ValueError("kernel_size, stride and dilation must be >= 1")
        self.in_channels, self.out_channels = int(in_channels), int(out_channels)
        self.kernel_size, self.stride, self.dilation = int(kernel_size), int(stride), int(dilation)
        self.activation = activation
        width = self.in_channels * self.kernel_size
        rng = np.random.default_rng(seed)
        bound = np.sqrt(6.0 / (width + self.out_channels))
        shape = (self.out_channels, self.in_channels, self.kernel_size)
        self.W = (np.array(weights, dtype=np.float64).reshape(shape) if weights is not None
                  else rng.uniform(-bound, bound, shape))
        self.b = np.zeros(self.out_channels) if bias is None else np.array(bias, dtype=np.float64)
        if self.b.shape != (self.out_channels,):
            raise ValueError("bias length must equal out_channels")

    @property
    def out_dim(self):
        return self.out_channels

    def params(self):
        return {"W": self.W, "b": self.b}

    def output_length(self, n: int) -> int:
        return conv_output_length(n, self.kernel_size, self.stride, self.dilation)

    def _windows(self, graph, x, n):
        """``[B, in_ch, n]`` -> ``[B, out_len, in_ch * k]``."""
        idx = window_indices(n, self.kernel_size, self.stride, self.dilation)
        z = graph.take(x, idx)                                   # [B, in_ch, L, k]
        z = graph.transpose(z, (0, 2, 1, 3))                     # [B, L, in_ch, k]
        return graph.reshape(z, (-1, idx.shape[0], self.in_channels * self.kernel_size))

    def _linear(self, graph, z, p):
        w = graph.reshape(p["W"], (self.out_channels, -1))
        return z @ graph.transpose(w, (1, 0)) + p["b"]            # [B, L, out]

    def build(self, graph, x, gate_in, p, n):
        x = graph.reshape(x, (-1, self.in_channels, n))
        z = self._windows(graph, x, n)
        y = _activate(graph, self._linear(graph, z, p), self.activation)
        return graph.transpose(y, (0, 2, 1)), None

    def __repr__(self):
        return (f"{type(self).__name__}({self.in_channels}->{self.out_channels}, k={self.kernel_size}, "
                f"s={self.stride}, d={self.dilation}, {self.activation})")


class FgnConv1dLayer(_GaussianMixin, Conv1dLayer):
    """Finite Gaussian 1-D convolution: each output channel is one FGN slid over the input.

    Centers are ``[out_channels, in_channels * k]``; spherical variance is one
    scalar per output channel.  The layer's g map ``[B, out_channels, L]``
    feeds the next gate through its per-sample maximum.
    """

    kind = "fgn-conv1d"
    is_fgn = True

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, dilation=1,
                 activation="relu", *, weights=None, bias=None, centers=None, sigma=None,
                 variance="spherical", p_norm=2.0, sigma0=1.0, seed=None):
        super().__init__(in_channels, out_channels, kernel_size, stride, dilation, activation,
                         weights=weights, bias=bias, seed=seed)
        self._init_gaussian(self.in_channels * self.kernel_size, centers, sigma, variance, p_norm, sigma0)
        self.coupled = False

    def params(self):
        return {"W": self.W, "b": self.b, "C": self.C, "sigma": self.sigma}

    def build(self, graph, x, gate_in, p, n):
        x = graph.reshape(x, (-1, self.in_channels, n))
        z = self._windows(graph, x, n)                           # [B, L, width]
        out_len = self.output_length(n)
        g = self._gaussian(graph, z, p)                          # [B*L, out]
        g = graph.reshape(g, (-1, out_len, self.out_channels))
        if gate_in is not None:
            g = g * graph.reshape(gate_in, (-1, 1, 1))
        y = _activate(graph, self._linear(graph, z, p), self.activation) * g
        return graph.transpose(y, (0, 2, 1)), graph.transpose(g, (0, 2, 1))


# ---------------------------------------------------------------------------
# the gate and the network

def gate(g_prev) -> float:
    """max of the previous layer's Gaussian components; 1 for the first layer."""
    g_prev = np.asarray(g_prev, dtype=np.float64)
    return 1.0 if g_prev.size == 0 else float(np.max(g_prev))


@dataclass
class ForwardResult:
    logits: np.ndarray          # [B, K]
    final_gate: np.ndarray      # [B]; per-sample max of the last FGN layer's g (1 without FGN layers)
    layer_g: list               # per layer: g array (batch-first) or None for classical layers
    layer_y: list


class _Compiled:
    """The network appended to ``graph`` (a fresh one by default) on input node ``x``."""

    def __init__(self, net: "Network", graph: Graph | None = None, x: Node | None = None):
        self.graph = g = Graph() if graph is None else graph
        self.x = g.leaf("x") if x is None else x
        self.params: dict[str, Node] = {}
        self.ys: list[Node] = []
        self.gs: list[Node | None] = []
        h = self.x
        gate_in = None
        for i, (layer, (in_shape, out_shape)) in enumerate(zip(net.layers, net.shapes())):
            p = {k: g.leaf(f"{i}.{k}") for k in layer.params()}
            self.params.update({f"{i}.{k}": v for k, v in p.items()})
            if isinstance(layer, Conv1dLayer):
                h, gl = layer.build(g, h, gate_in, p, in_shape[-1])
            else:
                h, gl = layer.build(g, h, gate_in, p)
            self.ys.append(h)
            self.gs.append(gl)
            if gl is not None and not net.gateless:
                gate_in = g.max(g.reshape(gl, (-1, int(np.prod(out_shape)))), axis=1, keepdims=True)
        self.logits = g.reshape(h, (-1, net.num_classes))
        self.gate = gate_in
        self.outputs = [self.logits] + self.ys + [gn for gn in self.gs if gn is not None]
        if gate_in is not None:
            self.outputs.append(gate_in)


class Network:
    """Ordered layer stack threading the Gaussian gate through FGN layers.

    ``input_shape`` is the per-sample shape: ``(D,)`` for dense inputs or
    ``(channels, n)`` for signals.  ``gateless=True`` disables the gate
    (every FGN layer receives gate 1), which is only useful as an ablation.
    """

    def __init__(self, layers, input_shape, gateless=False):
        self.layers = list(layers)
        if not self.layers:
            raise ValueError("a network needs at least one layer")
        self.input_shape = tuple(int(s) for s in np.atleast_1d(input_shape))
        self.gateless = bool(gateless)
        self.shapes()
        self._compiled = None

    def shapes(self) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
        """Per-layer (input shape, output shape), per sample; validates chaining."""
        out = []
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv1dLayer):
                ch, n = (1, shape[0]) if len(shape) == 1 else shape
                if ch != layer.in_channels:
                    raise ValueError(f"layer {i} expects {layer.in_channels} channels, got {ch}")
                new = (layer.out_channels, layer.output_length(n))
                shape = (ch, n)
            else:
                size = int(np.prod(shape))
                if size != layer.in_dim:
                    raise ValueError(f"layer {i} ({layer!r}) expects {layer.in_dim} inputs, got {size}")
                new = (layer.out_dim,)
            out.append((shape, new))
            shape = new
        return out

    @property
    def in_size(self) -> int:
        return int(np.prod(self.input_shape))

    @property
    def num_classes(self) -> int:
        return int(np.prod(self.shapes()[-1][1]))

    @property
    def has_fgn(self) -> bool:
        return any(layer.is_fgn for layer in self.layers)

    def fgn_layers(self):
        return [l for l in self.layers if l.is_fgn]

    def parameters(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.params().items()}

    @property
    def compiled(self) -> _Compiled:
        if self._compiled is None:
            self._compiled = _Compiled(self)
        return self._compiled

    def bindings(self, x) -> dict:
        c = self.compiled
        params = self.parameters()
        b = {c.params[k]: params[k] for k in c.params}
        b[c.x] = self._as_batch(x)
        return b

    def _as_batch(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.size == self.in_size and x.shape in (self.input_shape, (self.in_size,)):
            x = x.reshape((1,) + self.input_shape)
        return x.reshape((-1,) + self.input_shape)

    def auto_batch_size(self, budget: int = 4_000_000) -> int:
        """Rows per forward chunk so no per-layer intermediate exceeds ``budget`` floats."""
        per_row = 1
        for layer, (in_shape, out_shape) in zip(self.layers, self.shapes()):
            per_row = max(per_row, int(np.prod(in_shape)), int(np.prod(out_shape)))
            if layer.is_fgn:
                width = layer.C.shape[1]
                positions = int(np.prod(out_shape)) // layer.out_dim
                per_row = max(per_row, positions * layer.out_dim * width)
        return max(1, min(4096, budget // per_row))

    def forward(self, x, batch_size: int | None = None) -> ForwardResult:
        x = self._as_batch(x)
        batch_size = batch_size or self.auto_batch_size()
        c = self.compiled
        parts = []
        for start in range(0, max(len(x), 1), batch_size):
            c.graph.forward(self.bindings(x[start:start + batch_size]), outputs=c.outputs)
            parts.append(ForwardResult(
                logits=c.logits.value.copy(),
                final_gate=(np.ones(len(x[start:start + batch_size])) if c.gate is None
                            else c.gate.value[:, 0].copy()),
                layer_g=[None if gn is None else gn.value.copy() for gn in c.gs],
                layer_y=[y.value.copy() for y in c.ys],
            ))
        if len(parts) == 1:
            return parts[0]
        cat = lambda xs: None if xs[0] is None else np.concatenate(xs)
        return ForwardResult(
            logits=np.concatenate([p.logits for p in parts]),
            final_gate=np.concatenate([p.final_gate for p in parts]),
            layer_g=[cat([p.layer_g[i] for p in parts]) for i in range(len(self.layers))],
            layer_y=[cat([p.layer_y[i] for p in parts]) for i in range(len(self.layers))],
        )

    def logits(self, x, batch_size: int | None = None) -> np.ndarray:
        x = self._as_batch(x)
        batch_size = batch_size or self.auto_batch_size()
        c = self.compiled
        out = []
        for start in range(0, len(x), batch_size):
            c.graph.forward(self.bindings(x[start:start + batch_size]), outputs=[c.logits])
            out.append(c.logits.value.copy())
        return np.concatenate(out) if out else np.zeros((0, self.num_classes))

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.logits(x), axis=1)

    def copy(self) -> "Network":
        import copy
        net = copy.deepcopy(self)
        net._compiled = None
        return net

    def __getstate__(self):
        state = dict(self.__dict__)
        state["_compiled"] = None
        return state

    def __repr__(self):
        inner = ", ".join(repr(l) for l in self.layers)
        return f"Network([{inner}], input_shape={self.input_shape})"


# ---------------------------------------------------------------------------
# single-vector conveniences

def _single_layer_net(layer, x):
    x = np.asarray(x, dtype=np.float64)
    if isinstance(layer, Conv1dLayer):
        shape = (layer.in_channels, x.shape[-1])
    else:
        shape = (layer.in_dim,)
    return Network([layer], shape)


def dense_forward(layer: DenseLayer, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (layer.in_dim,):
        raise ValueError(f"expected input of length {layer.in_dim}, got shape {x.shape}")
    if layer.is_fgn:
        return fgn_dense_forward(layer, x, 1.0)[0]
    return _single_layer_net(layer, x).logits(x)[0]


def fgn_dense_forward(layer: FgnDenseLayer, x, gate_in: float = 1.0):
    """Returns ``(y, g)`` for a single input vector and an incoming gate value."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (layer.in_dim,):
        raise ValueError(f"expected input of length {layer.in_dim}, got shape {x.shape}")
    if not 0.0 <= gate_in <= 1.0:
        raise ValueError("gate_in must lie in [0, 1]")
    res = _single_layer_net(layer, x).forward(x)
    g = res.layer_g[0][0] * gate_in
    return res.layer_y[0][0] * gate_in, g


def conv1d_forward(layer: Conv1dLayer, x) -> np.ndarray:
    """``x`` of shape ``[n]`` or ``[in_channels, n]`` -> ``[out_channels, out_len]``."""
    x = np.asarray(x, dtype=np.float64)
    x = x.reshape(layer.in_channels, -1)
    layer.output_length(x.shape[1])
    res = _single_layer_net(layer, x).forward(x[None])
    return res.layer_y[0][0]


def gaussian_component(x, c, sigma=1.0, p_norm: float = 2.0, variance: str = "spherical") -> float:
    """g for one input and one center.

    ``sigma`` is the raw variance parameter: a scalar (spherical), a vector
    (diagonal) or a factor matrix L with covariance L L^T (full).
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    c = np.asarray(c, dtype=np.float64).ravel()
    if x.shape != c.shape:
        raise ValueError(f"input dim {x.size} != center dim {c.size}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(c))):
        raise ValueError("non-finite input")
    sig = np.asarray(sigma, dtype=np.float64)[None]
    layer = FgnDenseLayer(x.size, 1, "identity", weights=np.zeros((1, x.size)), bias=[1.0],
                          centers=c[None], sigma=sig, variance=variance, p_norm=p_norm)
    return float(_single_layer_net(layer, x).forward(x).layer_g[0][0, 0])
