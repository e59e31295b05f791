"""Flat ``key = value`` run configuration.

Precedence: command-line flags over the config file over the defaults in
:data:`KEYS`. Unknown keys are errors.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from .errors import ConfigError


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str) -> List[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _ints(text: str) -> List[int]:
    return [int(t) for t in text.split(",") if t.strip()]


PARSERS: Dict[str, Callable[[str], Any]] = {
    "int": int, "float": float, "str": str, "bool": _bool, "floats": _floats, "ints": _ints,
}


@dataclass(frozen=True)
class Key:
    type: str
    default: Any
    doc: str


KEYS: Dict[str, Key] = {
    # data
    "out_dir": Key("str", "run", "directory all outputs are written to"),
    "data_seed": Key("int", 1, "seed of the synthetic training split"),
    "test_seed": Key("int", 2, "seed of the synthetic test split"),
    "classes": Key("int", 10, "number of classes"),
    "per_class": Key("int", 500, "training images per class"),
    "test_per_class": Key("int", 200, "test images per class"),
    "image_shape": Key("ints", [3, 32, 32], "C,H,W of generated images"),
    "idx_images": Key("str", "", "IDX image file to ingest instead of generating"),
    "idx_labels": Key("str", "", "IDX label file matching idx_images"),
    "train_data": Key("str", "", "dataset file for training (default OUT/train.smiv)"),
    "test_data": Key("str", "", "dataset file for evaluation (default OUT/test.smiv)"),
    # backdoor
    "backdoor": Key("str", "checker", "checker | gaussian | none"),
    "target_class": Key("int", 0, "backdoor target class"),
    "patch_size": Key("int", 3, "side of the checker patch"),
    "gaussian_patch_size": Key("int", 10, "side of the gaussian patch"),
    "gaussian_seed": Key("int", 7, "seed of the gaussian patch"),
    "placement": Key("str", "fixed", "fixed | random"),
    "poison_fraction": Key("float", 0.1, "fraction of training images poisoned"),
    "poison_seed": Key("int", 3, "seed choosing poisoned images"),
    # training
    "model": Key("str", "", "weights file (default OUT/model.smiv)"),
    "model_seed": Key("int", 0, "initialization seed"),
    "epochs": Key("int", 20, "training epochs"),
    "batch_size": Key("int", 64, "mini-batch size"),
    "learning_rate": Key("float", 0.02, "SGD learning rate"),
    "momentum": Key("float", 0.9, "SGD momentum"),
    "train_seed": Key("int", 0, "shuffling / noise seed for training"),
    "intervention": Key("bool", False, "train with the noised-backdoor term"),
    "alphas": Key("floats", [1.0, 1.0, 1.0], "weights of clean, backdoor, noised-backdoor losses"),
    "intervention_sigma": Key("float", 0.25, "noise level of the noised-backdoor term"),
    # smoothing / inversion
    "sigma_grid": Key("floats", [0.12, 0.25, 0.5, 1.0], "noise levels of the search grid"),
    "epsilon_grid": Key("floats", [2.0, 5.0], "l2 radii of the search grid"),
    "n_samples": Key("int", 10, "Monte Carlo noise samples per step"),
    "steps": Key("int", 400, "PGD steps"),
    "step_size": Key("float", 0.0, "PGD step; 0 means 0.05 * epsilon"),
    "inversion_seed": Key("int", 0, "PGD noise seed"),
    "image_index": Key("int", 0, "starting image: index among non-target test images past the eval split"),
    "eval_size": Key("int", 200, "leading test images used to score perturbations"),
    "snapshot_every": Key("int", 50, "save x + delta every this many steps (0 = never)"),
    "method": Key("str", "smoothinv", "smoothinv | plainadv | nc"),
    "nc_lambda": Key("float", 1e-3, "mask l1 weight of neural cleanse"),
    "nc_step_size": Key("float", 0.5, "gradient step of neural cleanse"),
    "denoiser": Key("str", "", "external denoiser command (empty = identity)"),
    "denoiser_timeout": Key("float", 60.0, "seconds before the denoiser is killed"),
    # sanity / detection / evaluation
    "sanity_sigmas": Key("floats", [0.0, 0.12, 0.25, 0.5, 1.0], "noise levels of the sanity sweep"),
    "sanity_samples": Key("int", 10, "noise samples per image in the sanity sweep"),
    "sanity_size": Key("int", 500, "test images used by the sanity sweep (0 = all)"),
    "detect_epsilon": Key("float", 5.0, "radius used for detection"),
    "detect_sigma": Key("float", 0.25, "noise level used for detection"),
    "detect_full_grid": Key("bool", False, "search the full grid per class"),
    "threshold": Key("float", 0.5, "ASR above which a class is flagged"),
    "delta": Key("str", "", "perturbation file for eval-asr (default OUT/delta.smiv)"),
    "clamp": Key("bool", False, "clamp x + delta to [0, 1] when scoring"),
}


class RunConfig(dict):
    """Resolved key -> value table; attribute access for convenience."""

    def __getattr__(self, name: str):
        try:
            return self[name]
        except KeyError as exc:
            raise AttributeError(name) from exc


def _convert(key: str, text: str, where: str):
    if key not in KEYS:
        raise ConfigError(f"{where}: unknown key {key!r}")
    try:
        return PARSERS[KEYS[key].type](text.strip())
    except ValueError as exc:
        raise ConfigError(f"{where}: key {key!r} expects {KEYS[key].type}, got {text.strip()!r}") from exc


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, Any]:
    values: Dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: malformed line {raw.strip()!r}")
        values[key] = _convert(key, value, f"{source}:{lineno}")
    return values


def parse_flags(argv: Sequence[str]) -> Tuple[Optional[str], Dict[str, Any]]:
    """``--config path`` plus ``--key value`` pairs (``--key=value`` also accepted)."""
    config_path = None
    values: Dict[str, Any] = {}
    i = 0
    while i < len(argv):
        arg = argv[i]
        if not arg.startswith("--"):
            raise ConfigError(f"unexpected argument {arg!r}")
        name, eq, value = arg[2:].partition("=")
        if not eq:
            if i + 1 >= len(argv):
                raise ConfigError(f"flag --{name} needs a value")
            value = argv[i + 1]
            i += 1
        i += 1
        key = name.replace("-", "_")
        if key == "config":
            config_path = value
        else:
            values[key] = _convert(key, value, f"flag --{name}")
    return config_path, values


def parse_config(config_path=None, flags: Optional[Dict[str, Any]] = None) -> RunConfig:
    cfg = RunConfig({k: v.default for k, v in KEYS.items()})
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        cfg.update(parse_config_text(path.read_text(), str(path)))
    for key, value in (flags or {}).items():
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r}")
        cfg[key] = value
    return cfg


def render_config(cfg: Dict[str, Any]) -> str:
    def fmt(v):
        if isinstance(v, list):
            return ",".join(repr(x) for x in v)
        return str(v)
    return "".join(f"{k} = {fmt(v)}\n" for k, v in cfg.items())
