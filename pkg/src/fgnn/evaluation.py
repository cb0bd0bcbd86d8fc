"""Confidence statistics, rejection rates and 2-D grid renders (CSV + PPM)."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .attacks import softmax
from .layers import Network

CONFIDENT = 0.5

# fixed 10-class palette (RGB), class k -> PALETTE[k % 10]
PALETTE = np.array([
    (31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40), (148, 103, 189),
    (140, 86, 75), (227, 119, 194), (127, 127, 127), (188, 189, 34), (23, 190, 207),
], dtype=np.float64)


def confidence(logits):
    """``(class index, confidence)`` per row: softmax argmax (lowest index on ties) and max."""
    z = np.asarray(logits, dtype=np.float64)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    if z.shape[-1] < 2:
        raise ValueError("confidence needs at least two logits")
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    p = softmax(z)
    cls = np.argmax(p, axis=1)
    conf = p[np.arange(len(p)), cls]
    if single:
        return int(cls[0]), float(conf[0])
    return cls, conf


@dataclass
class ConfidenceHistogram:
    bin_edges: np.ndarray
    counts: np.ndarray
    values: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def fraction_above(self, theta: float = CONFIDENT) -> float:
        return float(np.mean(self.values > theta)) if len(self.values) else 0.0

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["bin_lo", "bin_hi", "count"])
            for lo, hi, c in zip(self.bin_edges[:-1], self.bin_edges[1:], self.counts):
                w.writerow([f"{lo:.6g}", f"{hi:.6g}", int(c)])


def histogram_confidences(net: Network, inputs, bins: int = 10) -> ConfidenceHistogram:
    x = getattr(inputs, "inputs", inputs)
    if len(x) == 0:
        raise ValueError("no inputs to evaluate")
    _, conf = confidence(net.logits(x))
    edges = np.linspace(0.0, 1.0, bins + 1)
    counts, _ = np.histogram(conf, bins=edges)
    return ConfidenceHistogram(edges, counts, conf)


def rejection_rate(net: Network, inputs, theta: float = CONFIDENT) -> float:
    """Fraction of inputs whose confidence is below ``theta``."""
    x = getattr(inputs, "inputs", inputs)
    k = net.num_classes
    if not 1.0 / k < theta < 1.0:
        raise ValueError(f"theta must lie in (1/{k}, 1)")
    _, conf = confidence(net.logits(x))
    return float(np.mean(conf < theta))


# ---------------------------------------------------------------------------
# grids

@dataclass
class GridRender:
    width: int
    height: int
    classes: np.ndarray | None          # [height, width] or None for raw-value renders
    confidence: np.ndarray | None
    values: np.ndarray | None = None    # raw neuron output for single-neuron heatmaps
    center: np.ndarray | None = None
    basis: np.ndarray | None = None     # [2, D] orthonormal rows
    half_width: float = 0.0
    u: np.ndarray | None = None         # column offsets along basis[0]
    v: np.ndarray | None = None         # row offsets along basis[1]

    def to_csv(self, path) -> None:
        """Columns: row, col, u, v, then class/confidence or value."""
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            if self.values is not None:
                w.writerow(["row", "col", "u", "v", "value"])
            else:
                w.writerow(["row", "col", "u", "v", "class", "confidence"])
            for i in range(self.height):
                for j in range(self.width):
                    head = [i, j, repr(float(self.u[j])), repr(float(self.v[i]))]
                    if self.values is not None:
                        w.writerow(head + [repr(float(self.values[i, j]))])
                    else:
                        w.writerow(head + [int(self.classes[i, j]), repr(float(self.confidence[i, j]))])

    def rgb(self, num_classes: int = 10) -> np.ndarray:
        """uint8 image; row 0 is the largest v (top of the picture)."""
        if self.values is not None:
            # diverging map: negative blue, zero white, positive red
            scale = max(float(np.max(np.abs(self.values))), 1e-12)
            t = np.clip(self.values / scale, -1, 1)[..., None]
            white = np.ones(3) * 255
            red, blue = np.array([214.0, 39, 40]), np.array([31.0, 119, 180])
            img = np.where(t >= 0, white + t * (red - white), white - t * (blue - white))
        else:
            base = PALETTE[self.classes % len(PALETTE)]
            # uniform outputs fade to black, certain ones show the full class colour
            k = max(num_classes, 2)
            strength = np.clip((self.confidence - 1.0 / k) / (1.0 - 1.0 / k), 0, 1)[..., None]
            img = base * strength
        return np.round(img[::-1]).astype(np.uint8)

    def to_ppm(self, path, num_classes: int = 10) -> None:
        img = self.rgb(num_classes)
        with open(path, "wb") as f:
            f.write(f"P6\n{self.width} {self.height}\n255\n".encode("ascii"))
            f.write(img.tobytes())


def _classify_points(net, pts):
    cls, conf = confidence(net.logits(pts))
    return np.atleast_1d(cls), np.atleast_1d(conf)


def activity_heatmap(model, x_range, y_range, resolution: int = 64, unit: int = 0) -> GridRender:
    """Evaluate a 2-input model over a grid.

    ``model`` is a Network (class + confidence per cell) or a single layer
    (raw output of neuron ``unit`` per cell).
    """
    if resolution < 1:
        raise ValueError("resolution must be >= 1")
    xs = np.linspace(x_range[0], x_range[1], resolution)
    ys = np.linspace(y_range[0], y_range[1], resolution)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    common = dict(width=resolution, height=resolution, u=xs, v=ys, basis=np.eye(2),
                  center=np.zeros(2))
    if isinstance(model, Network):
        if model.in_size != 2:
            raise ValueError(f"heatmaps need a 2-input model, got {model.in_size} inputs")
        cls, conf = _classify_points(model, pts)
        return GridRender(classes=cls.reshape(gy.shape), confidence=conf.reshape(gy.shape), **common)
    in_dim = getattr(model, "in_dim", None)
    if in_dim != 2:
        raise ValueError(f"heatmaps need a 2-input model, got {in_dim} inputs")
    net = Network([model], (2,))
    vals = net.logits(pts)[:, unit]
    return GridRender(classes=None, confidence=None, values=vals.reshape(gy.shape), **common)


def orthonormal_pair(dir1, dir2) -> np.ndarray:
    """Gram-Schmidt on two directions; rejects (near-)parallel or zero ones."""
    a = np.asarray(dir1, dtype=np.float64).ravel()
    b = np.asarray(dir2, dtype=np.float64).ravel()
    na = np.linalg.norm(a)
    if na == 0:
        raise ValueError("first direction is zero")
    e1 = a / na
    b = b - (b @ e1) * e1
    b = b - (b @ e1) * e1          # second pass for accuracy
    nb = np.linalg.norm(b)
    if nb <= 1e-12 * max(np.linalg.norm(dir2), 1.0):
        raise ValueError("directions are parallel")
    return np.stack([e1, b / nb])


def random_orthogonal(dir1, seed: int = 0) -> np.ndarray:
    d = np.asarray(dir1, dtype=np.float64).ravel()
    r = np.random.default_rng(seed).standard_normal(d.size)
    return orthonormal_pair(d, r)[1]


def cross_section(net: Network, center, dir1, dir2, half_width: float, resolution: int = 33) -> GridRender:
    """Class + confidence at ``center + u*e1 + v*e2`` for u, v in [-half_width, half_width]."""
    if half_width < 0:
        raise ValueError("half_width must be >= 0")
    basis = orthonormal_pair(dir1, dir2)
    center = np.asarray(center, dtype=np.float64).ravel()
    n = 1 if half_width == 0 else int(resolution)
    if n < 1:
        raise ValueError("resolution must be >= 1")
    u = np.linspace(-half_width, half_width, n) if n > 1 else np.zeros(1)
    v = u.copy()
    gu, gv = np.meshgrid(u, v)
    pts = center + gu.reshape(-1, 1) * basis[0] + gv.reshape(-1, 1) * basis[1]
    cls, conf = _classify_points(net, pts)
    return GridRender(n, n, cls.reshape(n, n), conf.reshape(n, n), center=center, basis=basis,
                      half_width=float(half_width), u=u, v=v)


def fgsm_cross_section(net: Network, x, label: int, epsilon: float, resolution: int = 33,
                       seed: int = 0, direction=None) -> GridRender:
    """Cross-section spanned by the FGSM step and a random orthogonal direction.

    The half-width is the length of the step ``epsilon * sign(grad)``, so the
    FGSM image sits at the right edge of the centre row.  A precomputed
    ``direction`` (e.g. ``x_adv - x``) may be passed instead.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    if direction is None:
        from .attacks import fgsm
        out = fgsm(net, x[None], [label], epsilon)
        direction = out.adversarial.reshape(-1) - x
    direction = np.asarray(direction, dtype=np.float64).ravel()
    hw = float(np.linalg.norm(direction))
    if hw == 0:
        raise ValueError("attack direction is zero (no gradient at this input)")
    return cross_section(net, x, direction, random_orthogonal(direction, seed), hw, resolution)


def image_to_image_section(net: Network, a, b, resolution: int = 33, seed: int = 0) -> GridRender:
    """Centre row runs from image ``a`` (left) to image ``b`` (right)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    d = b - a
    hw = float(np.linalg.norm(d)) / 2.0
    if hw == 0:
        raise ValueError("images are identical")
    return cross_section(net, (a + b) / 2.0, d, random_orthogonal(d, seed), hw, resolution)
