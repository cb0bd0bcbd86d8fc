"""Datasets: MNIST IDX files, randomized image sets, toy 2-D sets, 1-D signals.

All generators draw from ``numpy.random.Generator(PCG64(seed))`` so a
(seed, parameters) pair always yields the same bits.
"""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

MNIST_MEAN = 0.1307
MNIST_STD = 0.3081
# sentinel label for generated inputs that belong to no class
NO_CLASS = -1

IMAGES_MAGIC = 2051
LABELS_MAGIC = 2049


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray                 # [N, D] (or [N, C, n] for signals)
    labels: np.ndarray                 # [N] int
    num_classes: int
    normalization: tuple[float, float] | None = None
    provenance: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) == 0:
            raise ValueError("a dataset needs at least one sample")
        if len(self.labels) != len(self.inputs):
            raise ValueError("inputs and labels differ in length")
        if not np.all(np.isfinite(self.inputs)):
            raise ValueError("dataset inputs must be finite")
        if np.any(self.labels >= self.num_classes):
            raise ValueError("label out of range")

    def __len__(self):
        return len(self.labels)

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return replace(self, inputs=self.inputs[index], labels=self.labels[index])

    def denormalize(self, x=None) -> np.ndarray:
        x = self.inputs if x is None else np.asarray(x, dtype=np.float64)
        if self.normalization is None:
            return x
        mean, std = self.normalization
        return x * std + mean

    def to_csv(self, path) -> None:
        """One row per sample, flattened inputs then the label."""
        flat = self.inputs.reshape(len(self), -1)
        rows = np.column_stack([flat, self.labels])
        fmt = ["%.17g"] * flat.shape[1] + ["%d"]
        np.savetxt(path, rows, fmt=fmt, delimiter=",")


def normalize(x, mean=MNIST_MEAN, std=MNIST_STD):
    return (np.asarray(x, dtype=np.float64) - mean) / std


def denormalize(x, mean=MNIST_MEAN, std=MNIST_STD):
    return np.asarray(x, dtype=np.float64) * std + mean


def normalized_pixel_bounds(mean=MNIST_MEAN, std=MNIST_STD) -> tuple[float, float]:
    """Where raw pixel values 0 and 1 land after standardization."""
    return (0.0 - mean) / std, (1.0 - mean) / std


def _read_bytes(path) -> bytes:
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(2)
    opener = gzip.open if head == b"\x1f\x8b" else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx(buf: bytes, magic: int, header_ints: int, what: str):
    if len(buf) < 4 * header_ints:
        raise IdxFormatError(f"{what}: truncated header at byte offset {len(buf)}")
    header = struct.unpack(f">{header_ints}I", buf[: 4 * header_ints])
    if header[0] != magic:
        raise IdxFormatError(f"{what}: bad magic {header[0]} at byte offset 0 (expected {magic})")
    expected = int(np.prod(header[1:]))
    body = buf[4 * header_ints:]
    if len(body) < expected:
        raise IdxFormatError(
            f"{what}: truncated payload at byte offset {4 * header_ints + len(body)} "
            f"(expected {4 * header_ints + expected} bytes)")
    return header[1:], np.frombuffer(body, dtype=np.uint8, count=expected)


def read_idx_images(path) -> np.ndarray:
    """uint8 array ``[count, rows, cols]`` from an IDX3 file (plain or gzipped)."""
    (count, rows, cols), pixels = _parse_idx(_read_bytes(path), IMAGES_MAGIC, 4, str(path))
    return pixels.reshape(count, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    (count,), labels = _parse_idx(_read_bytes(path), LABELS_MAGIC, 2, str(path))
    return labels.copy()


def write_idx(path, images=None, labels=None) -> None:
    """Write uint8 images ``[N, rows, cols]`` or labels ``[N]`` as plain IDX."""
    with open(path, "wb") as f:
        if images is not None:
            images = np.asarray(images, dtype=np.uint8)
            f.write(struct.pack(">IIII", IMAGES_MAGIC, *images.shape))
            f.write(images.tobytes())
        else:
            labels = np.asarray(labels, dtype=np.uint8)
            f.write(struct.pack(">II", LABELS_MAGIC, len(labels)))
            f.write(labels.tobytes())


def load_mnist_idx(images_path, labels_path, normalize_inputs: bool = True) -> Dataset:
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise IdxFormatError(
            f"count mismatch: {len(images)} images vs {len(labels)} labels (byte offset 4)")
    x = images.reshape(len(images), -1).astype(np.float64) / 255.0
    norm = None
    if normalize_inputs:
        x = normalize(x)
        norm = (MNIST_MEAN, MNIST_STD)
    return Dataset(x, labels.astype(np.int64), 10, norm, f"idx:{Path(images_path).name}")


def bundled_mnist_paths() -> tuple[Path, Path]:
    """The 10k-digit MNIST sample packaged with the repository (``data/``)."""
    root = Path(__file__).resolve().parents[2] / "data"
    return root / "mnist10k-images-idx3-ubyte.gz", root / "mnist10k-labels-idx1-ubyte.gz"


def train_val_split(ds: Dataset, n_train: int, seed: int = 0) -> tuple[Dataset, Dataset]:
    order = np.random.default_rng(seed).permutation(len(ds))
    return ds.subset(order[:n_train]), ds.subset(order[n_train:])


def gen_full_random(n, dim, lo, hi, seed=0, num_classes=10) -> Dataset:
    """i.i.d. uniform inputs in [lo, hi]; labels are the NO_CLASS sentinel."""
    if n <= 0:
        raise ValueError("n must be positive")
    if not lo < hi:
        raise ValueError("need lo < hi")
    x = np.random.default_rng(seed).uniform(lo, hi, (n, dim))
    return Dataset(x, np.full(n, NO_CLASS), num_classes, provenance=f"full_random(seed={seed})")


def shuffle_pixels(ds: Dataset, seed=0) -> Dataset:
    """Independently permute the features of every sample (values are kept exactly)."""
    rng = np.random.default_rng(seed)
    flat = ds.inputs.reshape(len(ds), -1)
    keys = rng.random(flat.shape)
    perm = np.argsort(keys, axis=1)
    shuffled = np.take_along_axis(flat, perm, axis=1).reshape(ds.inputs.shape)
    return replace(ds, inputs=shuffled, labels=np.full(len(ds), NO_CLASS),
                   provenance=f"shuffled({ds.provenance}, seed={seed})")


def _balanced_labels(n):
    return np.arange(n) % 2


def gen_toy_linear(n, seed=0, separation=1.5, std=0.5) -> Dataset:
    """Two Gaussian blobs on either side of the line through (1, 1) with normal (1, 1).

    Class 1 sits ``separation`` along +normal from (1, 1), class 0 along -normal.
    """
    if n < 2:
        raise ValueError("n must be >= 2")
    rng = np.random.default_rng(seed)
    labels = _balanced_labels(n)
    normal = np.array([1.0, 1.0]) / np.sqrt(2.0)
    centers = np.where(labels[:, None] == 1, 1.0, -1.0) * separation * normal + 1.0
    x = centers + rng.normal(0.0, std, (n, 2))
    return Dataset(x, labels, 2, provenance=f"toy_linear(seed={seed})")


def gen_toy_rings(n, seed=0) -> Dataset:
    """Class 0 uniform in the unit disk, class 1 uniform in the annulus 1.5 <= r <= 2.5."""
    if n < 2:
        raise ValueError("n must be >= 2")
    rng = np.random.default_rng(seed)
    labels = _balanced_labels(n)
    u = rng.random(n)
    r_inner = np.sqrt(u)
    r_outer = np.sqrt(1.5 ** 2 + u * (2.5 ** 2 - 1.5 ** 2))
    r = np.where(labels == 0, r_inner, r_outer)
    theta = rng.uniform(0.0, 2.0 * np.pi, n)
    x = np.column_stack([r * np.cos(theta), r * np.sin(theta)])
    return Dataset(x, labels, 2, provenance=f"toy_rings(seed={seed})")


def gen_white_noise_signal(n, length, lo=-1.0, hi=1.0, seed=0, scale=1.0, num_classes=1) -> Dataset:
    """Uniform noise in [lo, hi] times ``scale`` (``scale=1e6`` probes far out of range)."""
    if not lo < hi:
        raise ValueError("need lo < hi")
    if n <= 0:
        raise ValueError("n must be positive")
    x = np.random.default_rng(seed).uniform(lo, hi, (n, 1, length)) * scale
    return Dataset(x, np.full(n, NO_CLASS), num_classes,
                   provenance=f"white_noise(seed={seed}, scale={scale:g})")


def gen_tone_signals(n, length=64, num_classes=4, noise=0.1, seed=0) -> Dataset:
    """Noisy sinusoids whose frequency encodes the class; amplitude stays inside [-1, 1].

    A stand-in for short audio clips when exercising 1-D convolutional networks.
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % num_classes
    t = np.arange(length)
    freqs = 1.0 + 1.5 * labels                       # cycles per window
    phase = rng.uniform(0, 2 * np.pi, n)
    amp = rng.uniform(0.5, 0.8, n)
    x = amp[:, None] * np.sin(2 * np.pi * freqs[:, None] * t[None] / length + phase[:, None])
    x = np.clip(x + rng.normal(0, noise, x.shape), -1.0, 1.0)
    return Dataset(x[:, None, :], labels, num_classes, provenance=f"tones(seed={seed})")
