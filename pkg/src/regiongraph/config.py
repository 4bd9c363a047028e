"""Run configuration: built-in defaults, then a YAML file, then environment, then flags.

Environment overrides use the ``REGIONGRAPH_`` prefix with ``__`` between
nesting levels, e.g. ``REGIONGRAPH_TRAIN__LR=0.01`` or ``REGIONGRAPH_SEED=3``.
Values are parsed as YAML scalars.
"""

from __future__ import annotations

import copy
import os
from pathlib import Path
from typing import Any, Mapping

import yaml

ENV_PREFIX = "REGIONGRAPH_"


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "out_dir": "runs/default",
    "dataset": None,
    "format": "ndjson",
    "mode": "single",
    "synth": {
        "num_videos": 200,
        "test_videos": 50,
        "frames": 16,
        "proposals_per_frame": 10,
        "d": None,  # follows model.d
        "noise_std": 0.1,
        "map_size": 48.0,
        "actor_size": 8.0,
        "pair_cue": 0.7,
        "contact_rate": 0.7,
        "randomize_region": True,
        "render_volume": False,
        "vocab_seed": 1234,
    },
    "model": {
        "d": 512,
        "layers": 3,
        "dropout": 0.3,
        "final_norm": True,
    },
    "train": {
        "lr": 0.00125,
        "iters": 2000,
        "batch_size": 2,
        "schedule": None,  # None: x0.1 at 90% of iters
        "momentum": 0.0,
        "weight_decay": 0.0,
        "frozen": [],
        "ablation": "joint",
        "log_every": 1,
        "checkpoint": None,  # warm start
    },
    "eval": {
        "clips": 1,
        "checkpoint": None,
        "split": "test",
    },
    "gradcheck": {
        "nodes": 6,
        "d": 8,
        "layers": 2,
        "classes": 3,
        "h": 1e-5,
        "tol": 1e-4,
        "modes": ["softmax_ce", "per_class_sigmoid_bce"],
    },
    "graphs": {
        "checkpoint": None,
        "split": "train",
        "limit": 5,
        "export_format": "json",
    },
}


def deep_merge(base: dict, override: Mapping) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, Mapping) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def _check_keys(cfg: Mapping, ref: Mapping, where: str = "") -> None:
    for key, val in cfg.items():
        if key not in ref:
            raise ConfigError(f"unknown config key {where + key!r}")
        if isinstance(val, Mapping) and isinstance(ref[key], dict):
            _check_keys(val, ref[key], f"{where}{key}.")


def env_overrides(environ: Mapping[str, str] | None = None) -> dict:
    environ = os.environ if environ is None else environ
    out: dict = {}
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        path = name[len(ENV_PREFIX):].lower().split("__")
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = yaml.safe_load(raw)
    return out


def resolve(config_path: str | Path | None = None, flags: Mapping | None = None,
            environ: Mapping[str, str] | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if config_path is not None:
        try:
            loaded = yaml.safe_load(Path(config_path).read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc.strerror}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {config_path}: {exc}") from exc
        if not isinstance(loaded, Mapping):
            raise ConfigError(f"config {config_path} must be a mapping")
        _check_keys(loaded, DEFAULTS)
        cfg = deep_merge(cfg, loaded)
    env = env_overrides(environ)
    _check_keys(env, DEFAULTS)
    cfg = deep_merge(cfg, env)
    if flags:
        _check_keys(flags, DEFAULTS)
        cfg = deep_merge(cfg, flags)
    if cfg["synth"]["d"] is None:
        cfg["synth"]["d"] = cfg["model"]["d"]
    if cfg["train"]["schedule"] is None:
        cfg["train"]["schedule"] = [[int(0.9 * cfg["train"]["iters"]), 0.1]]
    if cfg["dataset"] is None:
        cfg["dataset"] = str(Path(cfg["out_dir"]) / "data")
    if cfg["mode"] not in ("single", "multi"):
        raise ConfigError(f"mode must be 'single' or 'multi', got {cfg['mode']!r}")
    if cfg["format"] not in ("ndjson", "bin"):
        raise ConfigError(f"format must be 'ndjson' or 'bin', got {cfg['format']!r}")
    return cfg


def dump(cfg: Mapping, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(dict(cfg), sort_keys=True))
    return path
