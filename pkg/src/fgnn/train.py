"""Losses, the variance regularizer, optimizers, FGN initialization, training loop."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph, Node
from .layers import Network, SIGMA_FLOOR, _Compiled

log = logging.getLogger(__name__)

LOSS_KINDS = ("cross-entropy", "mse")


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch, batch, loss):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch = epoch, batch


@dataclass
class TrainConfig:
    loss: str = "cross-entropy"
    lam: float = 0.0                 # weight of the summed sigma^2 regularizer
    l2_weight: float = 0.0
    optimizer: str = "adam"
    lr: float = 1e-3
    sigma_lr: float | None = None    # optional separate step size for variance parameters
    sigma_optimizer: str | None = None   # None: same as the rest; "sgd" or "log-adam" for variances
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 1
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")
        if self.sigma_optimizer not in (None, "sgd", "adam", "log-adam"):
            raise ValueError("sigma_optimizer must be sgd, adam or log-adam")
        if not self.lr > 0 or (self.sigma_lr is not None and not self.sigma_lr > 0):
            raise ValueError("learning rates must be positive")
        if self.epochs < 0 or self.lam < 0 or self.l2_weight < 0 or self.batch_size < 1:
            raise ValueError("epochs, lam, l2_weight must be >= 0 and batch_size >= 1")


# ---------------------------------------------------------------------------
# optimizers: update a dict of arrays in place

class SGD:
    def __init__(self, lr):
        self.lr = lr

    def step(self, params, grads):
        for k, p in params.items():
            p -= self.lr * grads[k]


class Adam:
    """Adam; keys in ``log_keys`` are stepped in log-magnitude space.

    For those the moments track d loss / d log|p| = grad * p and the update
    is ``p *= exp(-step)``, so the sign is kept and the step is relative.
    """

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, log_keys=()):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.log_keys = set(log_keys)
        self.m, self.v = {}, {}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, p in params.items():
            g = grads[k] * p if k in self.log_keys else grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            step = self.lr / bc1 * m / (np.sqrt(v / bc2) + self.eps)
            if k in self.log_keys:
                p *= np.exp(-step)
            else:
                p -= step


class Split:
    """Route the keys in ``keys`` to ``second`` and everything else to ``first``."""

    def __init__(self, first, second, keys):
        self.first, self.second, self.keys = first, second, set(keys)

    def step(self, params, grads):
        self.first.step({k: p for k, p in params.items() if k not in self.keys}, grads)
        self.second.step({k: p for k, p in params.items() if k in self.keys}, grads)


def _single(kind, lr, cfg, log_keys=()):
    if kind == "sgd":
        return SGD(lr)
    return Adam(lr, cfg.beta1, cfg.beta2, cfg.eps, log_keys=log_keys)


def make_optimizer(cfg: TrainConfig, param_names):
    sigma_keys = [k for k in param_names if k.endswith(".sigma")]
    main = _single(cfg.optimizer, cfg.lr, cfg)
    if cfg.sigma_optimizer is None and cfg.sigma_lr is None:
        return main
    kind = cfg.sigma_optimizer or cfg.optimizer
    lr = cfg.lr if cfg.sigma_lr is None else cfg.sigma_lr
    if kind == "log-adam":
        second = _single("adam", lr, cfg, log_keys=sigma_keys)
    else:
        second = _single(kind, lr, cfg)
    return Split(main, second, sigma_keys)


# ---------------------------------------------------------------------------
# losses

def cross_entropy(graph: Graph, logits: Node, labels: Node) -> Node:
    return graph.nll(graph.log_softmax(logits, axis=1), labels)


def mse(graph: Graph, outputs: Node, targets: Node) -> Node:
    diff = graph.reshape(outputs, (-1,)) - graph.reshape(targets, (-1,))
    return graph.mean(graph.square(diff))


def sigma_penalty(graph: Graph, net: Network, params: dict[str, Node]) -> Node | None:
    """Sum of every FGN variance: sigma^2 per neuron, all diagonal entries, or trace(L L^T)."""
    terms = []
    for i, layer in enumerate(net.layers):
        if not layer.is_fgn:
            continue
        s = params[f"{i}.sigma"]
        terms.append(graph.sum(graph.square(s)))
    if not terms:
        return None
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def regularized_loss(graph: Graph, base_loss: Node, net: Network, params: dict[str, Node],
                     lam: float) -> Node:
    """base + lam * sum(sigma^2).  The constant floor is omitted: it has no gradient."""
    if lam == 0:
        return base_loss
    pen = sigma_penalty(graph, net, params)
    return base_loss if pen is None else base_loss + pen * lam


def regularizer_value(net: Network) -> float:
    """sum(sigma^2) over the network (including the numerical floor)."""
    return float(sum(np.sum(l.sigma_squared()) for l in net.fgn_layers()))


# ---------------------------------------------------------------------------
# initialization

def init_fgn_layer(layer, scheme="large_sigma", *, points=None, sigma=None, seed=0, ensure_coverage=True):
    """Initialize an FGN layer's centers/variances.

    ``scheme="from_data"`` puts every center on a randomly chosen row of
    ``points`` (with replacement when there are fewer rows than neurons).
    ``scheme="large_sigma"`` keeps the centers and sets every raw sigma to
    ``sigma``.  With ``ensure_coverage`` and ``points`` given, spherical
    variances are then widened where needed so each neuron reaches
    ``g >= 0.5`` on at least one point.
    """
    if not layer.is_fgn:
        raise ValueError("init_fgn_layer needs an FGN layer")
    rng = np.random.default_rng(seed)
    if points is not None:
        points = np.asarray(points, dtype=np.float64).reshape(-1, layer.C.shape[1])
    if scheme == "from_data":
        if points is None or len(points) == 0:
            raise ValueError("from_data needs a non-empty set of points")
        idx = rng.choice(len(points), size=layer.out_dim, replace=len(points) < layer.out_dim)
        layer.C[...] = points[idx]
    elif scheme != "large_sigma":
        raise ValueError(f"unknown init scheme {scheme!r}")
    if sigma is not None:
        if layer.variance == "full":
            layer.sigma[...] = np.eye(layer.C.shape[1]) * sigma
        else:
            layer.sigma[...] = sigma
    if ensure_coverage and points is not None and layer.variance == "spherical":
        d2 = (np.sum(points ** 2, 1)[:, None] - 2 * points @ layer.C.T + np.sum(layer.C ** 2, 1)[None])
        nearest = np.maximum(d2.min(axis=0), 0.0)
        needed = np.sqrt(nearest / np.log(2.0))
        layer.sigma[...] = np.where(layer.sigma ** 2 + SIGMA_FLOOR < needed ** 2, needed, np.abs(layer.sigma))
    return layer


# ---------------------------------------------------------------------------
# training loop

@dataclass
class EpochRecord:
    epoch: int
    loss: float
    accuracy: float
    sigma_min: float
    sigma_med: float
    sigma_max: float
    layer_sigma: list = field(default_factory=list)   # per FGN layer (min, median, max) of sigma^2


def _sigma_stats(net):
    per_layer = [(float(s.min()), float(np.median(s)), float(s.max()))
                 for s in (l.sigma_squared().ravel() for l in net.fgn_layers())]
    if not per_layer:
        return (float("nan"),) * 3, []
    allv = np.concatenate([l.sigma_squared().ravel() for l in net.fgn_layers()])
    return (float(allv.min()), float(np.median(allv)), float(allv.max())), per_layer


class LossGraph:
    """A private copy of a network's graph extended with labels, base loss and regularized total."""

    def __init__(self, net: Network, loss="cross-entropy", lam=0.0, l2_weight=0.0):
        c = _Compiled(net)
        g = c.graph
        self.net, self.compiled, self.graph = net, c, g
        self.targets = g.leaf("targets")
        if loss == "cross-entropy":
            self.base = cross_entropy(g, c.logits, self.targets)
        else:
            self.base = mse(g, c.logits, self.targets)
        total = regularized_loss(g, self.base, net, c.params, lam)
        if l2_weight:
            w_terms = [g.sum(g.square(c.params[k])) for k in c.params if k.endswith(".W")]
            l2 = w_terms[0]
            for t in w_terms[1:]:
                l2 = l2 + t
            total = total + l2 * l2_weight
        self.total = total

    def bindings(self, x, y):
        params = self.net.parameters()
        b = {node: params[k] for k, node in self.compiled.params.items()}
        b[self.compiled.x] = self.net._as_batch(x)
        b[self.targets] = np.asarray(y, dtype=np.float64)
        return b

    def evaluate(self, x, y, wrt=None):
        """Total loss at ``(x, y)``; with ``wrt`` also the gradients (keyed by node)."""
        self.graph.forward(self.bindings(x, y), outputs=[self.total, self.compiled.logits])
        grads = self.graph.backward(self.total, wrt=wrt) if wrt is not None else None
        return float(self.total.value), grads


def train_loop(net: Network, data, cfg: TrainConfig, callback=None):
    """Minibatch training in place.  Returns ``(net, history)``.

    ``data`` is a Dataset (or an ``(inputs, labels)`` pair).  For ``mse``
    the labels are the regression targets; 0/1 labels on a single output
    are mapped to -1/+1 (accuracy on the output sign), and integer labels
    on several outputs become one-hot rows.
    """
    x, y = (data.inputs, data.labels) if hasattr(data, "inputs") else data
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if len(x) == 0:
        raise ValueError("training data is empty")
    history: list[EpochRecord] = []
    if cfg.epochs == 0:
        return net, history
    if cfg.loss == "cross-entropy" and np.max(y) >= net.num_classes:
        raise ValueError("labels exceed the network's output dimension")
    targets = y.astype(np.float64)
    if cfg.loss == "mse":
        k = net.num_classes
        if y.ndim == 1 and k > 1:
            if not np.issubdtype(y.dtype, np.integer) or y.min() < 0 or y.max() >= k:
                raise ValueError(f"mse on {k} outputs needs integer labels in [0, {k})")
            targets = np.eye(k)[y]
        elif set(np.unique(y)) <= {0, 1}:
            targets = np.where(y > 0, 1.0, -1.0)
        if targets.size != len(y) * k:
            raise ValueError(f"mse targets of shape {y.shape} do not fit {k} outputs")

    lg = LossGraph(net, cfg.loss, cfg.lam, cfg.l2_weight)
    names = list(lg.compiled.params)
    leaves = [lg.compiled.params[k] for k in names]
    opt = make_optimizer(cfg, names)
    rng = np.random.default_rng(cfg.seed)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(x))
        total_loss, correct = 0.0, 0
        for b, start in enumerate(range(0, len(x), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            loss, grads = lg.evaluate(x[idx], targets[idx], wrt=leaves)
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch, b, loss)
            out = lg.compiled.logits.value
            if cfg.loss == "mse" and out.shape[1] == 1:
                correct += int(np.sum(np.sign(out[:, 0]) == np.sign(targets[idx])))
            elif cfg.loss == "mse":
                correct += int(np.sum(np.argmax(out, 1) == np.argmax(targets[idx], 1)))
            else:
                correct += int(np.sum(np.argmax(out, 1) == y[idx]))
            total_loss += loss * len(idx)
            params = net.parameters()
            opt.step(params, {k: grads[leaf].grad for k, leaf in zip(names, leaves)})
        (smin, smed, smax), per_layer = _sigma_stats(net)
        rec = EpochRecord(epoch, total_loss / len(x), correct / len(x), smin, smed, smax, per_layer)
        history.append(rec)
        log.info("epoch %d loss %.5f acc %.4f sigma2 [%.3g, %.3g, %.3g]",
                 epoch, rec.loss, rec.accuracy, smin, smed, smax)
        if callback is not None:
            callback(rec)
    return net, history


def accuracy(net: Network, data) -> float:
    return float(np.mean(net.predict(data.inputs) == data.labels))


def write_history_csv(history, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "loss", "accuracy", "sigma_min", "sigma_med", "sigma_max"])
        for r in history:
            w.writerow([r.epoch, repr(r.loss), repr(r.accuracy), repr(r.sigma_min),
                        repr(r.sigma_med), repr(r.sigma_max)])
