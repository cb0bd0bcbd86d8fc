"""Flat ``key = value`` experiment configuration.

Blank lines and ``#`` comments are ignored.  Every key must be a field of
:class:`ExperimentConfig`; values are converted to the field's type.  Errors
carry the offending line number.

Example::

    # train a small classical MNIST model
    dataset = mnist
    arch = dense:64:relu dense:64:relu dense:10:identity
    epochs = 15
    lr = 0.001
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path


class ConfigError(ValueError):
    def __init__(self, msg, line=None, source="<config>"):
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + msg)
        self.line = line


@dataclass
class ExperimentConfig:
    # data: mnist | idx | toy_linear | toy_rings | full_random | shuffled | tones | white_noise
    dataset: str = "mnist"
    images: str = ""                 # idx image/label files (dataset = idx)
    labels: str = ""
    split: str = "all"               # all | train | val (mnist/idx: seeded split at n_train)
    n_train: int = 6000
    n_samples: int = 1000            # generated sets, and the cap for attack/eval inputs
    data_seed: int = 0
    noise_scale: float = 1.0         # white_noise multiplier
    signal_length: int = 64
    num_classes: int = 10

    # model
    model: str = ""                  # input model file (convert/attack/eval; train continues it)
    arch: str = "dense:64:relu dense:64:relu dense:10:identity"
    sigma0: float = 1.0
    variance: str = "spherical"
    p_norm: float = 2.0
    center_init: str = "zero"        # zero | data (first FGN layer centers on training points)
    gateless: bool = False

    # training
    loss: str = "cross-entropy"
    lam: float = 0.0
    l2_weight: float = 0.0
    optimizer: str = "adam"
    lr: float = 1e-3
    sigma_lr: float = 0.0            # 0: same as lr
    sigma_optimizer: str = ""        # "" | sgd | adam | log-adam
    epochs: int = 1
    batch_size: int = 64

    # conversion
    tol: float = 1e-4
    ref_size: int = 1000
    coupled: bool = True

    # attacks
    attack: str = "fgsm"
    epsilons: str = "0,0.05,0.1,0.2,0.4,0.8"
    alpha_ratio: float = 1.0 / 30.0
    steps: int = 50
    c_low: float = 1e-2
    c_high: float = 1e2
    binary_steps: int = 9
    inner_iters: int = 200
    inner_lr: float = 0.01
    box_lo: float = float("nan")     # nan: normalized MNIST pixel bounds
    box_hi: float = float("nan")
    dump: int = 16

    # evaluation
    mode: str = "histogram"          # histogram | rejection | heatmap | cross-section
    bins: int = 10
    theta: float = 0.5
    resolution: int = 33
    x_min: float = -3.0
    x_max: float = 3.0
    y_min: float = -3.0
    y_max: float = 3.0
    section: str = "fgsm"            # fgsm | images
    epsilon: float = 0.06
    index: int = 0
    index_b: int = 1
    direction: str = ""              # .npy of attack directions from the attack command

    seed: int = 0
    out: str = "out"

    def epsilon_list(self) -> list[float]:
        try:
            return [float(e) for e in self.epsilons.replace(" ", "").split(",") if e]
        except ValueError as exc:
            raise ConfigError(f"bad epsilons list {self.epsilons!r}") from exc


_BOOL = {"1": True, "true": True, "yes": True, "on": True,
         "0": False, "false": False, "no": False, "off": False}


def _convert(name, raw, kind):
    if kind is bool:
        try:
            return _BOOL[raw.lower()]
        except KeyError:
            raise ValueError(f"{name} expects a boolean, got {raw!r}") from None
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    return raw


def _field_types():
    hints = {"str": str, "int": int, "float": float, "bool": bool}
    return {f.name: hints[f.type] for f in dataclasses.fields(ExperimentConfig)}


def parse_config(text: str, source: str = "<config>", base: ExperimentConfig | None = None) -> ExperimentConfig:
    types = _field_types()
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected key = value, got {line!r}", lineno, source)
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"unknown key {key!r}", lineno, source)
        if key in values:
            raise ConfigError(f"duplicate key {key!r}", lineno, source)
        try:
            values[key] = _convert(key, raw, types[key])
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}", lineno, source) from None
    return dataclasses.replace(base or ExperimentConfig(), **values)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", source=str(path)) from None
    return parse_config(text, str(path))


def apply_overrides(cfg: ExperimentConfig, pairs) -> ExperimentConfig:
    """``key=value`` strings from the command line, checked like config lines."""
    return parse_config("\n".join(pairs), "--set", cfg) if pairs else cfg
