"""Untargeted FGSM, l-inf PGD and Carlini-Wagner l2 attacks on any Network.

All attacks work on a batch ``x [N, ...]`` with integer labels ``[N]`` and
return one :class:`AttackOutcome` holding per-row arrays.  A row counts as a
successful attack only if the clean input was classified correctly and the
adversarial input is classified as something else with confidence > 0.5.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph
from .layers import Network, _Compiled

ATTACK_KINDS = ("fgsm", "pgd", "cw")
CONFIDENT = 0.5


@dataclass
class AttackConfig:
    kind: str = "fgsm"
    epsilon: float = 0.1           # fgsm/pgd l-inf radius
    alpha: float | None = None     # pgd step; defaults to epsilon / 30
    steps: int = 50
    eps_max: float = 2.0           # cw: largest accepted l2 distortion
    c_low: float = 1e-2
    c_high: float = 1e2
    binary_steps: int = 9
    inner_iters: int = 200
    inner_lr: float = 0.01
    target: int | None = None      # cw: None picks the second most likely class
    box: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"attack kind must be one of {ATTACK_KINDS}")
        if self.alpha is None:
            self.alpha = self.epsilon / 30.0
        if self.kind == "fgsm" and self.epsilon < 0:
            raise ValueError("fgsm epsilon must be >= 0")
        if self.kind == "pgd":
            if not (self.epsilon > 0 and self.alpha > 0):
                raise ValueError("pgd needs epsilon > 0 and alpha > 0")
            if self.alpha > self.epsilon:
                raise ValueError("pgd needs alpha <= epsilon")
            if self.steps < 1:
                raise ValueError("pgd needs steps >= 1")
        if self.kind == "cw":
            if not self.eps_max > 0:
                raise ValueError("cw needs eps_max > 0")
            if not 0 < self.c_low < self.c_high:
                raise ValueError("cw needs 0 < c_low < c_high")
            if self.binary_steps < 1 or self.inner_iters < 1 or not self.inner_lr > 0:
                raise ValueError("cw needs binary_steps, inner_iters >= 1 and inner_lr > 0")
            if not self.box[0] < self.box[1]:
                raise ValueError("cw box needs lo < hi")


@dataclass
class AttackOutcome:
    adversarial: np.ndarray
    true_label: np.ndarray
    original_class: np.ndarray
    adversarial_class: np.ndarray
    adversarial_confidence: np.ndarray
    success: np.ndarray
    linf: np.ndarray
    l2: np.ndarray
    failed: np.ndarray                      # non-finite gradient: row left unattacked
    ball_violations: int = 0                # pgd only
    constants: np.ndarray | None = None     # cw: the constant of the returned candidate
    probes: list = field(default_factory=list)   # cw: per row [(c, success, l2), ...]

    def __len__(self):
        return len(self.success)


# ---------------------------------------------------------------------------
# shared helpers

def softmax(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - np.max(z, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def success_predicate(true_label, original_class, adversarial_class, confidence):
    true_label = np.asarray(true_label)
    return ((np.asarray(original_class) == true_label)
            & (np.asarray(adversarial_class) != true_label)
            & (np.asarray(confidence) > CONFIDENT))


def _per_row_loss(logits, labels):
    z = logits - np.max(logits, axis=1, keepdims=True)
    logp = z - np.log(np.sum(np.exp(z), axis=1, keepdims=True))
    return -logp[np.arange(len(labels)), labels]


class _InputGradient:
    """Cross-entropy gradient with respect to the input, one row per sample."""

    def __init__(self, net: Network):
        self.net = net
        self.c = _Compiled(net)
        g = self.c.graph
        self.labels = g.leaf("labels")
        self.loss = g.nll(g.log_softmax(self.c.logits, axis=1), self.labels)

    def __call__(self, x, labels):
        params = self.net.parameters()
        b = {node: params[k] for k, node in self.c.params.items()}
        labels = np.asarray(labels, dtype=np.float64)
        step = self.net.auto_batch_size()
        grads, logits = [], []
        for s in range(0, len(x), step):
            b[self.c.x] = x[s:s + step]
            b[self.labels] = labels[s:s + step]
            self.c.graph.forward(b, outputs=[self.loss])
            g = self.c.graph.backward(self.loss, wrt=[self.c.x])[self.c.x].grad
            # the loss is a chunk mean; undo the 1/n so each row sees its own gradient
            grads.append(g * len(b[self.c.x]))
            logits.append(self.c.logits.value.copy())
        return np.concatenate(grads), np.concatenate(logits)


def _finish(net, x, xadv, labels, orig, failed, **extra) -> AttackOutcome:
    z = net.logits(xadv)
    conf = np.max(softmax(z), axis=1)
    adv_cls = np.argmax(z, axis=1)
    d = (xadv - x).reshape(len(x), -1)
    return AttackOutcome(
        adversarial=xadv, true_label=labels, original_class=orig, adversarial_class=adv_cls,
        adversarial_confidence=conf,
        success=success_predicate(labels, orig, adv_cls, conf) & ~failed,
        linf=np.max(np.abs(d), axis=1) if d.shape[1] else np.zeros(len(x)),
        l2=np.sqrt(np.sum(d * d, axis=1)), failed=failed, **extra)


def _prepare(net, x, labels):
    x = net._as_batch(x).copy()
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if len(labels) != len(x):
        raise ValueError("need one label per input")
    return x, labels


# ---------------------------------------------------------------------------
# attacks

def fgsm(net: Network, x, labels, epsilon: float) -> AttackOutcome:
    """One signed-gradient step of size ``epsilon`` (sign(0) = 0, no clipping)."""
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    x, labels = _prepare(net, x, labels)
    grad, logits = _InputGradient(net)(x, labels)
    orig = np.argmax(logits, axis=1)
    flat = grad.reshape(len(x), -1)
    failed = ~np.all(np.isfinite(flat), axis=1)
    step = np.sign(np.where(np.isfinite(grad), grad, 0.0))
    step[failed] = 0.0
    xadv = x + epsilon * step
    return _finish(net, x, xadv, labels, orig, failed)


def pgd(net: Network, x, labels, epsilon: float, alpha: float | None = None,
        steps: int = 50) -> AttackOutcome:
    """Iterated signed steps of size ``alpha`` clipped to the l-inf ball around ``x``.

    Starts at ``x`` and returns, per row, the iterate (after at least one
    step) with the highest cross-entropy loss.
    """
    cfg = AttackConfig("pgd", epsilon=epsilon, alpha=alpha, steps=steps)
    x, labels = _prepare(net, x, labels)
    lo, hi = x - epsilon, x + epsilon
    grad_fn = _InputGradient(net)
    cur = x.copy()
    best = x.copy()
    best_loss = np.full(len(x), -np.inf)
    failed = np.zeros(len(x), dtype=bool)
    violations = 0
    orig = None
    for s in range(cfg.steps):
        grad, logits = grad_fn(cur, labels)
        if orig is None:
            orig = np.argmax(logits, axis=1)
        bad = ~np.all(np.isfinite(grad.reshape(len(x), -1)), axis=1)
        failed |= bad
        step = np.sign(np.where(np.isfinite(grad), grad, 0.0))
        step[failed] = 0.0
        cur = np.minimum(hi, np.maximum(lo, cur + cfg.alpha * step))
        violations += int(np.sum(np.any(((cur < lo) | (cur > hi)).reshape(len(x), -1), axis=1)))
        loss = _per_row_loss(net.logits(cur), labels)
        better = loss > best_loss
        best[better] = cur[better]
        best_loss = np.where(better, loss, best_loss)
    best[failed] = x[failed]
    return _finish(net, x, best, labels, orig, failed, ball_violations=violations)


def _cw_target(logits, labels, target):
    if target is None:
        order = np.argsort(-logits, axis=1, kind="stable")
        return order[:, 1].copy()
    t = np.full(len(labels), int(target))
    if np.any(t == labels):
        raise ValueError("cw target must differ from the true label")
    return t


class _CwProblem:
    """sum over rows of ||box(tanh w) - x||^2 + c * max(max_{i != t} z_i - z_t, 0)."""

    BIG = 1e30

    def __init__(self, net: Network, box):
        self.net = net
        self.lo, self.hi = float(box[0]), float(box[1])
        g = self.graph = Graph()
        self.w = g.leaf("w")
        self.x0 = g.leaf("x0")
        self.c = g.leaf("c")              # [N]
        self.onehot = g.leaf("onehot")    # [N, K]
        half = (self.hi - self.lo) / 2.0
        self.xadv = (g.tanh(self.w) + 1.0) * half + self.lo
        self.net_c = _Compiled(net, g, self.xadv)
        z = self.net_c.logits
        z_t = g.sum(z * self.onehot, axis=1)
        z_other = g.max(z - self.onehot * self.BIG, axis=1)
        self.f = g.relu(z_other - z_t)
        diff = g.reshape(self.xadv - self.x0, (-1, net.in_size))
        self.dist = g.sum(g.square(diff), axis=1)
        self.total = g.sum(self.dist + self.c * self.f)

    def run(self, w, x0, c, onehot):
        params = self.net.parameters()
        b = {node: params[k] for k, node in self.net_c.params.items()}
        step = self.net.auto_batch_size()
        parts = []
        for s in range(0, len(w), step):
            sl = slice(s, s + step)
            b.update({self.w: w[sl], self.x0: x0[sl], self.c: c[sl], self.onehot: onehot[sl]})
            self.graph.forward(b, outputs=[self.total])
            grad = self.graph.backward(self.total, wrt=[self.w])[self.w].grad
            parts.append((grad, self.xadv.value.copy(), self.net_c.logits.value.copy()))
        return tuple(np.concatenate(p) for p in zip(*parts))


def box_from_tanh(w, lo, hi):
    return (np.tanh(w) + 1.0) * ((hi - lo) / 2.0) + lo


def tanh_from_box(x, lo, hi):
    u = np.clip((np.asarray(x, dtype=np.float64) - lo) / (hi - lo) * 2.0 - 1.0, -1 + 1e-9, 1 - 1e-9)
    return np.arctanh(u)


def cw_inner(problem: _CwProblem, x, labels, orig, onehot, c, iters, lr):
    """Gradient descent on w for fixed per-row constants ``c``.

    Returns the smallest-l2 successful iterate per row (or the last iterate)
    and a success mask.
    """
    lo, hi = problem.lo, problem.hi
    w = tanh_from_box(x, lo, hi)
    n = len(x)
    best = box_from_tanh(w, lo, hi)
    best_l2 = np.full(n, np.inf)
    found = np.zeros(n, dtype=bool)
    for _ in range(iters):
        grad, xadv, z = problem.run(w, x, c, onehot)
        conf = np.max(softmax(z), axis=1)
        ok = success_predicate(labels, orig, np.argmax(z, axis=1), conf)
        l2 = np.sqrt(np.sum((xadv - x).reshape(n, -1) ** 2, axis=1))
        better = ok & (l2 < best_l2)
        best[better] = xadv[better]
        best_l2[better] = l2[better]
        found |= ok
        grad = np.where(np.isfinite(grad), grad, 0.0)
        w = w - lr * grad
    last = box_from_tanh(w, lo, hi)
    # the final iterate has not been checked yet
    z = problem.net.logits(last)
    ok = success_predicate(labels, orig, np.argmax(z, axis=1), np.max(softmax(z), axis=1))
    l2 = np.sqrt(np.sum((last - x).reshape(n, -1) ** 2, axis=1))
    better = ok & (l2 < best_l2)
    best[better] = last[better]
    best_l2[better] = l2[better]
    found |= ok
    best[~found] = last[~found]
    return best, found


def cw(net: Network, x, labels, cfg: AttackConfig | None = None, **overrides) -> AttackOutcome:
    """Carlini-Wagner l2 with a per-row search over the constant c.

    The first probe is ``c_low``.  Until a row first succeeds its constant
    grows tenfold per probe (capped at ``c_high``); after that it bisects on
    a log scale between the largest failing and smallest succeeding
    constants.  The smallest-distortion success among all ``binary_steps``
    probes is returned and rejected if its l2 distortion exceeds ``eps_max``.
    """
    cfg = cfg or AttackConfig("cw", **overrides)
    if cfg.kind != "cw":
        raise ValueError("cw() needs a cw AttackConfig")
    x, labels = _prepare(net, x, labels)
    lo, hi = cfg.box
    n = len(x)
    z0 = net.logits(x)
    orig = np.argmax(z0, axis=1)
    target = _cw_target(z0, labels, cfg.target)
    onehot = np.eye(net.num_classes)[target]
    problem = _CwProblem(net, cfg.box)

    best = box_from_tanh(tanh_from_box(x, lo, hi), lo, hi)
    best_l2 = np.full(n, np.inf)
    best_c = np.full(n, np.nan)
    probes = [[] for _ in range(n)]
    c_lo = np.full(n, np.nan)           # largest failing constant so far
    c_hi = np.full(n, np.nan)           # smallest succeeding constant so far
    c = np.full(n, cfg.c_low)
    for step in range(cfg.binary_steps):
        cand, ok = cw_inner(problem, x, labels, orig, onehot, c, cfg.inner_iters, cfg.inner_lr)
        l2 = np.sqrt(np.sum((cand - x).reshape(n, -1) ** 2, axis=1))
        for i in range(n):
            probes[i].append((float(c[i]), bool(ok[i]), float(l2[i])))
        better = ok & (l2 < best_l2)
        best[better] = cand[better]
        best_l2[better] = l2[better]
        best_c[better] = c[better]
        if step == 0:
            # keep the failed candidate around for rows that never succeed
            best[~ok] = cand[~ok]
        c_hi = np.where(ok, np.fmin(c, c_hi), c_hi)
        c_lo = np.where(ok, c_lo, np.fmax(c, c_lo))
        lower = np.where(np.isnan(c_lo), cfg.c_low, c_lo)
        c = np.where(np.isnan(c_hi), np.minimum(c * 10.0, cfg.c_high), np.sqrt(lower * c_hi))
    out = _finish(net, x, best, labels, orig, np.zeros(n, dtype=bool), constants=best_c, probes=probes)
    out.success &= out.l2 <= cfg.eps_max
    return out


def run_attack(net: Network, x, labels, cfg: AttackConfig) -> AttackOutcome:
    if cfg.kind == "fgsm":
        return fgsm(net, x, labels, cfg.epsilon)
    if cfg.kind == "pgd":
        return pgd(net, x, labels, cfg.epsilon, cfg.alpha, cfg.steps)
    return cw(net, x, labels, cfg)


# ---------------------------------------------------------------------------
# sweeps

@dataclass
class SweepRow:
    epsilon: float
    attempted: int
    succeeded: int
    mean_l2: float
    mean_linf: float


def attack_sweep(net: Network, dataset, kind: str, eps_list, **cfg_kw) -> list[SweepRow]:
    """Success counts per epsilon over the correctly classified inputs.

    For ``cw`` each epsilon is used as ``eps_max``; for ``pgd`` the step is
    ``epsilon / 30`` unless ``alpha_ratio`` is given.  Means are taken over
    every attempted input.
    """
    eps_list = [float(e) for e in eps_list]
    if eps_list != sorted(eps_list):
        raise ValueError("epsilon list must be sorted ascending")
    x, y = dataset.inputs, dataset.labels
    correct = net.predict(x) == y
    xs, ys = x[correct], y[correct]
    alpha_ratio = cfg_kw.pop("alpha_ratio", 1.0 / 30.0)
    rows = []
    for eps in eps_list:
        if len(xs) == 0 or eps == 0:
            rows.append(SweepRow(eps, len(xs), 0, 0.0, 0.0))
            continue
        if kind == "pgd":
            cfg = AttackConfig("pgd", epsilon=eps, alpha=eps * alpha_ratio, **cfg_kw)
        elif kind == "cw":
            cfg = AttackConfig("cw", eps_max=eps, **cfg_kw)
        else:
            cfg = AttackConfig(kind, epsilon=eps, **cfg_kw)
        out = run_attack(net, xs, ys, cfg)
        rows.append(SweepRow(eps, len(xs), int(np.sum(out.success)),
                             float(np.mean(out.l2)), float(np.mean(out.linf))))
    return rows


def write_sweep_csv(rows, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epsilon", "attempted", "succeeded", "mean_l2", "mean_linf"])
        for r in rows:
            w.writerow([repr(r.epsilon), r.attempted, r.succeeded, repr(r.mean_l2), repr(r.mean_linf)])
