"""Turn a trained classical network into an FGN network with the same outputs.

Each classical neuron keeps its weights and gets a Gaussian centered on the
point of its zero-output hyperplane closest to the origin.  The variance is
found per layer by doubling until the converted network's logits stay within
a tolerance of the classical ones on a reference set.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .layers import Conv1dLayer, DenseLayer, FgnConv1dLayer, FgnDenseLayer, Network

log = logging.getLogger(__name__)

MAX_DOUBLINGS = 64
DEFAULT_TOL = 1e-4
MAX_REFERENCE = 5000


class ConversionError(ValueError):
    """The search ran out of doublings; ``best_deviation`` is the closest it got."""

    def __init__(self, msg, best_deviation=float("nan"), layer=None):
        super().__init__(msg)
        self.best_deviation = best_deviation
        self.layer = layer


@dataclass
class ConversionReport:
    per_layer_sigma: list[float]
    max_deviation: float
    search_iterations: int
    argmax_agreement: float = 1.0
    tolerance: float = DEFAULT_TOL
    per_layer_iterations: list[int] = field(default_factory=list)
    monotone: bool = True


def center_from_neuron(W, b) -> np.ndarray:
    """Projection of the origin onto the hyperplane ``W.x + b = 0``."""
    W = np.asarray(W, dtype=np.float64).ravel()
    nrm2 = float(W @ W)
    if nrm2 == 0.0:
        raise ValueError("all-zero weight vector has no zero-output hyperplane")
    return -float(b) * W / nrm2


def _centers(W2d, b):
    nrm2 = np.sum(W2d * W2d, axis=1)
    if np.any(nrm2 == 0.0):
        bad = int(np.flatnonzero(nrm2 == 0.0)[0])
        raise ValueError(f"neuron {bad} has an all-zero weight vector")
    return -(b / nrm2)[:, None] * W2d


def _to_fgn(layer, sigma, coupled):
    if isinstance(layer, FgnDenseLayer) or isinstance(layer, FgnConv1dLayer):
        raise ValueError(f"layer {layer!r} is already an FGN layer")
    if isinstance(layer, Conv1dLayer):
        W2d = layer.W.reshape(layer.out_channels, -1)
        return FgnConv1dLayer(layer.in_channels, layer.out_channels, layer.kernel_size,
                              layer.stride, layer.dilation, layer.activation,
                              weights=layer.W.copy(), bias=layer.b.copy(),
                              centers=_centers(W2d, layer.b),
                              sigma=np.full(layer.out_channels, float(sigma)))
    if isinstance(layer, DenseLayer):
        return FgnDenseLayer(layer.in_dim, layer.out_dim, layer.activation,
                             weights=layer.W.copy(), bias=layer.b.copy(),
                             centers=_centers(layer.W, layer.b),
                             sigma=np.full(layer.out_dim, float(sigma)), coupled=coupled)
    raise ValueError(f"unsupported layer kind {type(layer).__name__}")


def _set_sigma(layer, sigma):
    layer.sigma[...] = sigma


def _deviation(net, ref, target) -> float:
    out = net.logits(ref)
    if not np.all(np.isfinite(out)):
        return float("inf")
    return float(np.max(np.abs(out - target)))


def find_variance(net: Network, layer_index: int, ref_inputs, target_logits, tol: float,
                  sigma0: float = 1.0, max_doublings: int = MAX_DOUBLINGS):
    """Smallest ``sigma0 * 2**k`` for layer ``layer_index`` meeting ``tol``.

    ``net`` is modified in place (the layer keeps the returned sigma).
    Returns ``(sigma, deviation, probes, monotone)``.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    if len(ref_inputs) == 0:
        raise ValueError("reference set is empty")
    layer = net.layers[layer_index]
    sigma = float(sigma0)
    best = float("inf")
    prev = float("inf")
    monotone = True
    for k in range(max_doublings):
        _set_sigma(layer, sigma)
        dev = _deviation(net, ref_inputs, target_logits)
        if dev > prev * (1 + 1e-9) + 1e-15:
            monotone = False
            warnings.warn(f"layer {layer_index}: deviation rose from {prev:.3g} to {dev:.3g} "
                          f"at sigma={sigma:g}", RuntimeWarning)
        prev = dev
        best = min(best, dev)
        if dev <= tol:
            return sigma, dev, k + 1, monotone
        sigma *= 2.0
    raise ConversionError(f"layer {layer_index}: no sigma up to {sigma0}*2^{max_doublings} "
                          f"reaches tol {tol:g} (best deviation {best:.3g})", best, layer_index)


def convert_network(net: Network, ref_inputs, tol: float = DEFAULT_TOL, *, coupled=True,
                    sigma0: float = 1.0, max_reference: int = MAX_REFERENCE, seed: int = 0):
    """Convert every layer of ``net`` to FGN.  Returns ``(fgn_net, report)``.

    Variances are searched front to back; layer j of L may use a deviation
    budget of ``tol * (j + 1) / L`` so the final network ends within ``tol``.
    """
    ref = net._as_batch(ref_inputs)
    if len(ref) == 0:
        raise ValueError("reference set is empty")
    if len(ref) > max_reference:
        idx = np.sort(np.random.default_rng(seed).choice(len(ref), max_reference, replace=False))
        ref = ref[idx]
    for i, layer in enumerate(net.layers):
        if getattr(layer, "is_fgn", False) or not isinstance(layer, (DenseLayer, Conv1dLayer)):
            raise ValueError(f"layer {i} ({layer!r}) cannot be converted")
    target = net.logits(ref)
    # every layer starts at sigma = inf (g == gate exactly), so each stage sees
    # how its gate scales all later layers
    work = Network([_to_fgn(l, np.inf, coupled) for l in net.layers], net.input_shape)
    n = len(work.layers)
    sigmas, iters = [], []
    monotone = True
    for j in range(n):
        s, dev, k, mono = find_variance(work, j, ref, target, tol * (j + 1) / n, sigma0)
        log.info("layer %d: sigma=%g after %d probes (deviation %.3g)", j, s, k, dev)
        sigmas.append(s)
        iters.append(k)
        monotone &= mono
    out = work.logits(ref)
    agree = float(np.mean(np.argmax(out, 1) == np.argmax(target, 1)))
    report = ConversionReport(sigmas, float(np.max(np.abs(out - target))), int(sum(iters)),
                              agree, tol, iters, monotone)
    return work, report
