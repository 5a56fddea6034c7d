"""One flat JSON run configuration shared by all commands.

Every field has a default; unknown keys are rejected. The config hash is
the 64-bit FNV-1a of the canonical (sorted-key, compact) serialization,
and is what checkpoints are stamped with.
"""

from __future__ import annotations

import json

DEFAULTS = {
    # data generation
    "num_classes": 8,
    "scenes_per_class": 25,
    "image_size": 256,
    "clutter": 0.5,
    "blur_prob": 0.3,
    "occlusion_prob": 0.3,
    "distractor_classes": 8,
    "data_seed": 7,
    # training
    "batch_size": 32,
    "lr": 1e-4,
    "epochs": 20,
    "lam_neg": 1.0,
    "s03": 0.3,
    "mode": "aar",  # aar | baseline_arcface_00
    "seed": 0,
    "c_out": 128,
    "d_embed": 128,
    "arcface_s": 30.0,
    "arcface_m": 0.3,
    "input_size": 128,
    "baseline_scale": 0.0,
    "val_every": 1,
    "split": "close",  # close | open
}


class ConfigError(ValueError):
    pass


def canonical_json(config: dict) -> str:
    return json.dumps(config, sort_keys=True, separators=(",", ":"))


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def config_hash(config: dict) -> int:
    return fnv1a64(canonical_json(config).encode("utf-8"))


def make_config(overrides: dict = None) -> dict:
    cfg = dict(DEFAULTS)
    for key, value in (overrides or {}).items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key: {key!r}")
        cfg[key] = value
    if cfg["mode"] not in ("aar", "baseline_arcface_00"):
        raise ConfigError(f"unknown mode: {cfg['mode']!r}")
    if cfg["split"] not in ("close", "open"):
        raise ConfigError(f"unknown split: {cfg['split']!r}")
    if cfg["batch_size"] < 2:
        raise ConfigError("batch_size must be >= 2")
    return cfg


def load_config(path: str) -> dict:
    with open(path) as f:
        return make_config(json.load(f))
