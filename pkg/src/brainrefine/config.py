"""Experiment configuration: one YAML document, defaults below, env overrides.

Any key can be overridden from the environment with
``BRAINREFINE__<section>__<key>[__<subkey>]=<yaml value>``, e.g.
``BRAINREFINE__refiner__epochs=50``.
"""
from __future__ import annotations

import copy
import json
import os
from pathlib import Path
from typing import Mapping, Optional

import yaml

ENV_PREFIX = "BRAINREFINE__"

DEFAULTS = {
    "seed": 0,
    "data": {"n": 100, "shape": [48, 48, 48], "noise_sigma": 0.05, "texture_amp": 0.1, "split": [0.8, 0.2]},
    "autoencoder": {"channels": [32, 64, 96], "num_res_blocks": 1, "activation": "leaky_relu", "kl_weight": 1e-6,
                    "epochs": 60, "lr": 1e-3, "weight_decay": 1e-5, "batch": 4},
    "ldm": {"channels": [32, 64, 96], "num_res_blocks": 2, "attention": [False, True, True],
            "schedule": {"T": 200, "beta_start": 0.0075, "beta_end": 0.1025, "kind": "linear"},
            "epochs": 400, "lr": 2.5e-4, "weight_decay": 0.0, "batch": 4},
    "refiner": {"channels": [16, 32, 64], "num_res_blocks": 1, "attention": [False, False, True],
                "patch_size": 16, "stride": 8, "full_prob": 0.1,
                "schedule": {"T": 100, "beta_start": 0.0015, "beta_end": 0.25, "kind": "scaled_linear"},
                "epochs": 300, "lr": 2e-4, "weight_decay": 0.0, "batch": 32, "patches_per_volume": 4,
                "mode": "sequential"},
    "generate": {"n": 20},
    "metrics": {
        "axes": [0, 1, 2],
        "lpips": {"n": 1000, "patch": 24},
        "sharpness": {"n": 1000, "patch": 24, "sigma": 0.5},
        "noise": {"smooth_sigma": 1.0, "bins": 64, "regions": ["white-matter", "ventricle"]},
        "hog": {"cell": 6, "orient_bins": 9, "regions": ["whole-brain", "cerebellum"]},
        "features": {"n_per_volume": 50, "patch": 24, "k": [5, 10, 20]},
        "backbone": {"kind": "random-conv", "channels": [16, 32, 64], "seed": 0},
    },
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: Mapping, path="") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}.{k}" if path else k
        if k not in out:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(out[k], dict):
            if not isinstance(v, Mapping):
                raise ConfigError(f"config key {where!r} must be a mapping")
            out[k] = _merge(out[k], v, where)
        else:
            out[k] = v
    return out


def env_overrides(environ: Optional[Mapping[str, str]] = None) -> dict:
    environ = os.environ if environ is None else environ
    over: dict = {}
    for key, raw in sorted(environ.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        parts = key[len(ENV_PREFIX):].split("__")
        node = over
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = yaml.safe_load(raw)
    return over


def load_config(path=None, overrides: Optional[Mapping] = None, environ: Optional[Mapping[str, str]] = None) -> dict:
    """Defaults <- YAML file <- explicit overrides <- environment."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        doc = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(doc, Mapping):
            raise ConfigError(f"{path}: top level must be a mapping")
        cfg = _merge(cfg, doc)
    if overrides:
        cfg = _merge(cfg, overrides)
    cfg = _merge(cfg, env_overrides(environ))
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    shape = cfg["data"]["shape"]
    if len(shape) != 3 or any(int(n) % 4 for n in shape):
        raise ConfigError(f"data.shape must be 3 sizes divisible by 4, got {shape}")
    p, s = cfg["refiner"]["patch_size"], cfg["refiner"]["stride"]
    if not 0 < s < p <= min(shape):
        raise ConfigError(f"refiner needs 0 < stride < patch_size <= min(shape), got stride={s}, patch={p}")
    levels = len(cfg["refiner"]["channels"])
    if p % 2 ** (levels - 1):
        raise ConfigError(f"refiner.patch_size must be divisible by {2 ** (levels - 1)} for {levels} U-Net levels, got {p}")


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(json.loads(json.dumps(cfg)), sort_keys=True)
