"""``fgnn`` command line: train | convert | attack | eval.

Exit codes: 0 success, 2 configuration error, 3 numeric failure,
4 tolerance failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import modelfile
from .attacks import attack_sweep, write_sweep_csv, run_attack, AttackConfig
from .config import ConfigError, ExperimentConfig, apply_overrides, load_config
from .convert import ConversionError, convert_network
from .data import normalized_pixel_bounds
from .evaluation import (activity_heatmap, fgsm_cross_section, histogram_confidences,
                         image_to_image_section, rejection_rate)
from .experiments import build_network, dataset_from_config
from .train import TrainConfig, TrainingDiverged, init_fgn_layer, train_loop, write_history_csv

log = logging.getLogger("fgnn")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_TOLERANCE = 0, 2, 3, 4


def _train_config(cfg: ExperimentConfig, seed: int) -> TrainConfig:
    return TrainConfig(loss=cfg.loss, lam=cfg.lam, l2_weight=cfg.l2_weight, optimizer=cfg.optimizer,
                       lr=cfg.lr, sigma_lr=cfg.sigma_lr or None,
                       sigma_optimizer=cfg.sigma_optimizer or None, epochs=cfg.epochs,
                       batch_size=cfg.batch_size, seed=seed)


def _load_model(cfg):
    if not cfg.model:
        raise ConfigError("this command needs model = <path>")
    try:
        return modelfile.load(cfg.model)
    except OSError as exc:
        raise ConfigError(f"cannot read model: {exc}") from None


def _box(cfg):
    lo, hi = normalized_pixel_bounds()
    return (lo if np.isnan(cfg.box_lo) else cfg.box_lo, hi if np.isnan(cfg.box_hi) else cfg.box_hi)


def cmd_train(cfg, out: Path, seed: int) -> int:
    ds = dataset_from_config(cfg)
    if cfg.model:
        net = _load_model(cfg)
    else:
        net = build_network(cfg.arch, ds.inputs.shape[1:], seed=seed, sigma0=cfg.sigma0,
                            variance=cfg.variance, p_norm=cfg.p_norm, gateless=cfg.gateless)
        if cfg.center_init == "data":
            first = net.fgn_layers()[:1]
            for layer in first:
                init_fgn_layer(layer, "from_data", points=ds.inputs.reshape(len(ds), -1), seed=seed)
        elif cfg.center_init != "zero":
            raise ConfigError(f"center_init must be zero or data, got {cfg.center_init!r}")
    _, hist = train_loop(net, ds, _train_config(cfg, seed))
    modelfile.save(net, out / "model.fgnn")
    write_history_csv(hist, out / "history.csv")
    if hist:
        print(f"epochs={len(hist)} loss={hist[-1].loss:.6g} accuracy={hist[-1].accuracy:.4f}")
    else:
        print("epochs=0 (initial model written)")
    return EXIT_OK


def cmd_convert(cfg, out: Path, seed: int) -> int:
    net = _load_model(cfg)
    ds = dataset_from_config(cfg)
    ref = ds.inputs[: cfg.ref_size]
    try:
        fgn, report = convert_network(net, ref, cfg.tol, coupled=cfg.coupled, seed=seed)
    except ConversionError as exc:
        print(f"conversion failed: {exc}", file=sys.stderr)
        return EXIT_TOLERANCE
    modelfile.save(fgn, out / "model.fgnn")
    with open(out / "conversion.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["layer", "sigma", "iterations"])
        for i, (s, k) in enumerate(zip(report.per_layer_sigma, report.per_layer_iterations)):
            w.writerow([i, repr(s), k])
    print(f"sigma per layer: {report.per_layer_sigma}")
    print(f"max deviation: {report.max_deviation:.3g} (tol {cfg.tol:g}); "
          f"argmax agreement: {report.argmax_agreement:.4f}; probes: {report.search_iterations}")
    return EXIT_OK if report.max_deviation <= cfg.tol else EXIT_TOLERANCE


def cmd_attack(cfg, out: Path, seed: int) -> int:
    net = _load_model(cfg)
    ds = dataset_from_config(cfg)
    ds = ds.subset(np.arange(min(cfg.n_samples, len(ds))))
    eps = cfg.epsilon_list()
    extra = {}
    if cfg.attack == "pgd":
        extra = dict(alpha_ratio=cfg.alpha_ratio, steps=cfg.steps)
    elif cfg.attack == "cw":
        extra = dict(c_low=cfg.c_low, c_high=cfg.c_high, binary_steps=cfg.binary_steps,
                     inner_iters=cfg.inner_iters, inner_lr=cfg.inner_lr, box=_box(cfg))
    rows = attack_sweep(net, ds, cfg.attack, eps, **extra)
    write_sweep_csv(rows, out / "sweep.csv")
    # sample dump: the first inputs the sweep attacked, their adversarial versions and directions
    correct = np.flatnonzero(net.predict(ds.inputs) == ds.labels)[: cfg.dump]
    for e in eps:
        if e == 0 or len(correct) == 0:
            continue
        kw = dict(extra)
        ratio = kw.pop("alpha_ratio", None)
        if cfg.attack == "pgd":
            acfg = AttackConfig("pgd", epsilon=e, alpha=e * ratio, **kw)
        elif cfg.attack == "cw":
            acfg = AttackConfig("cw", eps_max=e, **kw)
        else:
            acfg = AttackConfig("fgsm", epsilon=e)
        res = run_attack(net, ds.inputs[correct], ds.labels[correct], acfg)
        np.save(out / f"adversarial_eps{e:g}.npy", res.adversarial)
        np.save(out / f"direction_eps{e:g}.npy", res.adversarial - ds.inputs[correct])
    np.save(out / "dump_indices.npy", correct)
    for r in rows:
        print(f"eps={r.epsilon:g} attempted={r.attempted} succeeded={r.succeeded}")
    return EXIT_OK


def cmd_eval(cfg, out: Path, seed: int) -> int:
    net = _load_model(cfg)
    mode = cfg.mode
    if mode == "heatmap":
        grid = activity_heatmap(net, (cfg.x_min, cfg.x_max), (cfg.y_min, cfg.y_max), cfg.resolution)
        grid.to_csv(out / "heatmap.csv")
        grid.to_ppm(out / "heatmap.ppm", net.num_classes)
        print(f"cells={grid.width * grid.height}")
        return EXIT_OK
    ds = dataset_from_config(cfg)
    if mode == "histogram":
        h = histogram_confidences(net, ds.inputs[: cfg.n_samples], cfg.bins)
        h.to_csv(out / "histogram.csv")
        print(f"fraction_above_0.5={h.fraction_above(0.5):.4f} n={h.total}")
    elif mode == "rejection":
        r = rejection_rate(net, ds.inputs[: cfg.n_samples], cfg.theta)
        print(f"rejection_rate={r:.4f} theta={cfg.theta:g}")
    elif mode == "cross-section":
        if cfg.section == "images":
            grid = image_to_image_section(net, ds.inputs[cfg.index], ds.inputs[cfg.index_b],
                                          cfg.resolution, seed)
        elif cfg.section == "fgsm":
            direction = None
            if cfg.direction:
                dirs = np.load(cfg.direction)
                idx_file = Path(cfg.direction).with_name("dump_indices.npy")
                if idx_file.exists():
                    pos = np.flatnonzero(np.load(idx_file) == cfg.index)
                    if len(pos) == 0:
                        raise ConfigError(f"index {cfg.index} is not among the dumped inputs")
                    direction = dirs[pos[0]]
                else:
                    direction = dirs[0]
            grid = fgsm_cross_section(net, ds.inputs[cfg.index], int(ds.labels[cfg.index]),
                                      cfg.epsilon, cfg.resolution, seed, direction=direction)
        else:
            raise ConfigError(f"section must be fgsm or images, got {cfg.section!r}")
        grid.to_csv(out / "cross_section.csv")
        grid.to_ppm(out / "cross_section.ppm", net.num_classes)
        print(f"cells={grid.width * grid.height} half_width={grid.half_width:.6g}")
    else:
        raise ConfigError(f"unknown eval mode {mode!r}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "convert": cmd_convert, "attack": cmd_attack, "eval": cmd_eval}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fgnn", description="Finite Gaussian neuron experiments")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="key = value configuration file")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--out", help="output directory (overrides the config)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        cfg = apply_overrides(cfg, args.set)
        seed = cfg.seed if args.seed is None else args.seed
        out = Path(args.out or cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        code = COMMANDS[args.command](cfg, out, seed)
        return code
    except (ConfigError, modelfile.ModelFormatError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
