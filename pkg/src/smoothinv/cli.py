"""Command line: ``smoothinv <subcommand> [--config path] [--key value ...]``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
"""
from __future__ import annotations

import logging
import shlex
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import io
from .config import KEYS, RunConfig, parse_config, parse_flags
from .data import (
    BackdoorSpec,
    Dataset,
    checker_backdoor,
    generate_synthetic_dataset,
    load_idx_dataset,
    make_gaussian_backdoor,
    poison_dataset,
    split_dataset,
)
from .detection import identify_target_class
from .errors import ConfigError
from .inversion import (
    InversionConfig,
    neural_cleanse_synthesize,
    select_best_config,
    select_best_plain,
    smoothed_builder,
)
from .smoothing import ExternalDenoiser, Identity, sanity_sweep
from .training import (
    Intervention,
    TrainConfig,
    evaluate_asr,
    evaluate_clean_accuracy,
    model_init,
    train,
    train_with_intervention,
)

logger = logging.getLogger("smoothinv")

SUBCOMMANDS = ("gen-data", "train", "sanity", "invert", "detect", "eval-asr")

USAGE = f"usage: smoothinv {{{'|'.join(SUBCOMMANDS)}}} [--config PATH] [--KEY VALUE ...]"


def _out(cfg: RunConfig, name: str) -> Path:
    return Path(cfg.out_dir) / name


def _path(cfg: RunConfig, key: str, default: str) -> Path:
    return Path(cfg[key]) if cfg[key] else _out(cfg, default)


def _require(*paths: Path) -> None:
    for p in paths:
        if not p.exists():
            raise ConfigError(f"missing input file {p}")


def _backdoor(cfg: RunConfig, channels: int) -> Optional[BackdoorSpec]:
    if cfg.backdoor == "none":
        return None
    if cfg.backdoor == "checker":
        return checker_backdoor(cfg.target_class, cfg.patch_size, channels, cfg.placement)
    if cfg.backdoor == "gaussian":
        k = cfg.gaussian_patch_size
        return make_gaussian_backdoor(cfg.gaussian_seed, (k, k), channels, cfg.target_class)
    raise ConfigError(f"key 'backdoor' must be checker, gaussian or none, got {cfg.backdoor!r}")


def _transform(cfg: RunConfig):
    if cfg.denoiser:
        return ExternalDenoiser(shlex.split(cfg.denoiser), cfg.denoiser_timeout)
    return Identity()


def _eval_and_pool(cfg: RunConfig, test: Dataset):
    if not 0 < cfg.eval_size < len(test):
        raise ConfigError(f"eval_size must be in (0, {len(test)})")
    return split_dataset(test, cfg.eval_size)


def _start_image(cfg: RunConfig, pool: Dataset, target: int):
    candidates = np.flatnonzero(pool.labels != target)
    if not 0 <= cfg.image_index < len(candidates):
        raise ConfigError(f"image_index must be in [0, {len(candidates)})")
    return pool[int(candidates[cfg.image_index])]


def _inv_cfg(cfg: RunConfig, epsilon: float, target: int) -> InversionConfig:
    return InversionConfig(
        epsilon=epsilon, target=target, steps=cfg.steps,
        step_size=cfg.step_size or None, seed=cfg.inversion_seed,
        snapshot_every=cfg.snapshot_every,
    )


# --------------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, report: Dict) -> None:
    if cfg.idx_images or cfg.idx_labels:
        _require(Path(cfg.idx_images), Path(cfg.idx_labels))
        full = load_idx_dataset(cfg.idx_images, cfg.idx_labels)
        n_test = min(cfg.test_per_class * full.class_count, len(full) // 2)
        test, trainset = split_dataset(full, n_test)
        trainset = Dataset(trainset.images, trainset.labels, full.class_count, "train")
        test = Dataset(test.images, test.labels, full.class_count, "test")
    else:
        shape = tuple(cfg.image_shape)
        trainset = generate_synthetic_dataset(cfg.data_seed, cfg.classes, cfg.per_class, shape, "train")
        test = generate_synthetic_dataset(cfg.test_seed, cfg.classes, cfg.test_per_class, shape, "test")
    io.save_dataset(_path(cfg, "train_data", "train.smiv"), trainset)
    io.save_dataset(_path(cfg, "test_data", "test.smiv"), test)
    report["train_size"] = len(trainset)
    report["test_size"] = len(test)


def cmd_train(cfg: RunConfig, report: Dict) -> None:
    train_path, test_path = _path(cfg, "train_data", "train.smiv"), _path(cfg, "test_data", "test.smiv")
    _require(train_path, test_path)
    data, test = io.load_dataset(train_path), io.load_dataset(test_path)
    spec = _backdoor(cfg, data.image_shape[0])
    if cfg.intervention and spec is None:
        raise ConfigError("intervention training needs a backdoor")
    iv = Intervention(tuple(cfg.alphas), cfg.intervention_sigma) if cfg.intervention else None
    tcfg = TrainConfig(cfg.epochs, cfg.batch_size, cfg.learning_rate, cfg.momentum, cfg.train_seed, iv)
    m = model_init(cfg.model_seed, data.image_shape, data.class_count)
    if iv is not None:
        m, metrics = train_with_intervention(m, data, spec, tcfg)
    else:
        if spec is not None:
            data = poison_dataset(data, spec, cfg.poison_fraction, np.random.default_rng(cfg.poison_seed))
        m, metrics = train(m, data, tcfg)
    io.save_model(_path(cfg, "model", "model.smiv"), m)
    report["clean_accuracy"] = evaluate_clean_accuracy(m, test)
    if spec is not None:
        report["backdoor_asr"] = evaluate_asr(m, test, spec)
    report["loss_history"] = metrics.loss_history


def cmd_sanity(cfg: RunConfig, report: Dict) -> None:
    model_path, test_path = _path(cfg, "model", "model.smiv"), _path(cfg, "test_data", "test.smiv")
    _require(model_path, test_path)
    m, test = io.load_model(model_path), io.load_dataset(test_path)
    spec = _backdoor(cfg, test.image_shape[0])
    if spec is None:
        raise ConfigError("sanity needs a backdoor")
    if cfg.sanity_size:
        test = test.subset(np.arange(min(cfg.sanity_size, len(test))))
    rows = sanity_sweep(m, spec, test, cfg.sanity_sigmas, cfg.sanity_samples, cfg.inversion_seed)
    report["sanity"] = io.Table(
        ["sigma", "clean_accuracy", "backdoor_asr"],
        [[r.sigma, r.clean_accuracy, r.backdoor_asr] for r in rows],
    )


def cmd_invert(cfg: RunConfig, report: Dict) -> None:
    model_path, test_path = _path(cfg, "model", "model.smiv"), _path(cfg, "test_data", "test.smiv")
    _require(model_path, test_path)
    if cfg.method not in ("smoothinv", "plainadv", "nc"):
        raise ConfigError(f"key 'method' must be smoothinv, plainadv or nc, got {cfg.method!r}")
    m, test = io.load_model(model_path), io.load_dataset(test_path)
    target = cfg.target_class
    eval_set, pool = _eval_and_pool(cfg, test)
    x = _start_image(cfg, pool, target)
    report["start_label"] = x.label
    io.export_image_ppm(x.pixels, _out(cfg, "clean.ppm"))

    if cfg.method == "nc":
        trig = neural_cleanse_synthesize(m, [x], target, cfg.nc_lambda, cfg.steps, cfg.nc_step_size,
                                         cfg.inversion_seed)
        io.save_tensor(_out(cfg, "mask.smiv"), trig.mask)
        io.save_tensor(_out(cfg, "pattern.smiv"), trig.pattern)
        io.export_image_ppm(trig(x.pixels[None])[0], _out(cfg, "final.ppm"))
        report["asr"] = evaluate_asr(m, eval_set, trig, target)
        report["mask_l1"] = float(trig.mask.sum())
        return

    base_cfg = _inv_cfg(cfg, cfg.epsilon_grid[0], target)
    if cfg.method == "plainadv":
        best = select_best_plain(m, x, base_cfg, eval_set, cfg.epsilon_grid)
    else:
        build = smoothed_builder(m, cfg.n_samples, transform=_transform(cfg))
        best = select_best_config(build, x, base_cfg, eval_set, cfg.epsilon_grid, cfg.sigma_grid)
    io.save_tensor(_path(cfg, "delta", "delta.smiv"), best.delta)
    for step, img in best.snapshots:
        io.export_image_ppm(img, _out(cfg, f"progress_{step:04d}.ppm"))
    io.export_image_ppm(x.pixels + best.delta, _out(cfg, "final.ppm"))
    report["asr"] = best.asr
    report["best.epsilon"] = best.config.epsilon
    report["best.sigma"] = best.sigma
    report["best.seed"] = best.config.seed
    report["delta_norm"] = float(np.linalg.norm(best.delta.astype(np.float64)))
    report["loss_trace"] = best.loss_trace
    report["grid"] = io.Table(
        ["epsilon", "sigma", "seed", "asr"], [[c.epsilon, c.sigma, c.seed, c.asr] for c in best.grid]
    )


def cmd_detect(cfg: RunConfig, report: Dict) -> None:
    model_path, test_path = _path(cfg, "model", "model.smiv"), _path(cfg, "test_data", "test.smiv")
    _require(model_path, test_path)
    m, test = io.load_model(model_path), io.load_dataset(test_path)
    eval_set, pool = _eval_and_pool(cfg, test)
    # Any class may be the target, so the start image is simply the pool entry.
    if not 0 <= cfg.image_index < len(pool):
        raise ConfigError(f"image_index must be in [0, {len(pool)})")
    x = pool[cfg.image_index]
    inv = _inv_cfg(cfg, cfg.detect_epsilon, 0 if x.label else 1)
    grids = (cfg.epsilon_grid, cfg.sigma_grid) if cfg.detect_full_grid else (None, None)
    rep = identify_target_class(
        m, x, list(range(m.class_count)), inv, eval_set, cfg.threshold,
        cfg.detect_sigma, cfg.n_samples, *grids,
    )
    report["start_label"] = x.label
    report["threshold"] = rep.threshold
    report["flagged"] = sorted(rep.flagged)
    report["verdict"] = rep.verdict
    report["per_class"] = io.Table(["class", "asr"], [[c, a] for c, a in sorted(rep.per_class_asr.items())])


def cmd_eval_asr(cfg: RunConfig, report: Dict) -> None:
    model_path, test_path = _path(cfg, "model", "model.smiv"), _path(cfg, "test_data", "test.smiv")
    delta_path = _path(cfg, "delta", "delta.smiv")
    _require(model_path, test_path, delta_path)
    m, test, delta = io.load_model(model_path), io.load_dataset(test_path), io.load_tensor(delta_path)
    report["asr"] = evaluate_asr(m, test, delta, cfg.target_class, clamp=cfg.clamp)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sanity": cmd_sanity,
    "invert": cmd_invert,
    "detect": cmd_detect,
    "eval-asr": cmd_eval_asr,
}


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    if not argv or argv[0] in ("-h", "--help"):
        print(USAGE)
        print("\nkeys:")
        for k, v in KEYS.items():
            print(f"  --{k.replace('_', '-'):22s} {v.doc} (default {v.default})")
        return 0 if argv else 1
    sub = argv[0]
    if sub not in COMMANDS:
        print(f"unknown subcommand {sub!r}\n{USAGE}", file=sys.stderr)
        return 1
    try:
        config_path, flags = parse_flags(argv[1:])
        cfg = parse_config(config_path, flags)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1

    report: Dict = {"subcommand": sub, "config": dict(cfg)}
    started = time.perf_counter()
    try:
        COMMANDS[sub](cfg, report)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit code 2
        logger.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    report["wall_seconds"] = time.perf_counter() - started
    io.write_report(report, _out(cfg, f"{sub}.report"))
    return 0


if __name__ == "__main__":
    sys.exit(main())
