"""One JSON document configuring every stage, with a versioned schema."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from pathlib import Path

from .features import FrameConfig
from .model import TseNetConfig
from .trainer import TrainConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


def _defaults(dc) -> dict:
    return {f.name: f.default for f in dataclasses.fields(dc)}


DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "frame": _defaults(FrameConfig),
    "tsenet": _defaults(TseNetConfig),
    "train": {k: v for k, v in _defaults(TrainConfig).items() if k != "seed"},
    "ubm": {"n_components": 512, "em_iters": 10, "split_iters": 2},
    "tv": {"rank": 400, "em_iters": 5},
    "simulate": {"count": 100, "snr_low": 0.0, "snr_high": 5.0},
    "metrics": {"taps": 512},
}

PRESETS = {
    "full": {},
    "tiny": {
        "tsenet": {"M": 16, "L": 4, "N": 16, "O": 32, "P": 3, "b": 2, "r": 1, "D1": 8, "D2": 4},
        "tv": {"rank": 8},
    },
    "tiny-plus": {
        "tsenet": {"M": 64, "N": 64, "O": 128, "b": 4, "r": 2},
    },
    "desk": {
        "tsenet": {"M": 32, "L": 20, "N": 32, "O": 64, "P": 3, "b": 3, "r": 2, "D1": 16, "D2": 8},
        "train": {"segment_seconds": 1.0, "batch_size": 4, "max_epochs": 30, "lr_init": 5e-3},
        "ubm": {"n_components": 16, "em_iters": 5, "split_iters": 2},
        "tv": {"rank": 16, "em_iters": 5},
        "simulate": {"count": 80},
        "metrics": {"taps": 32},
    },
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def load_config(spec: str | None = None, overrides: dict | None = None) -> dict:
    """Resolve a preset name or JSON file path, then apply ``overrides``."""
    cfg = copy.deepcopy(DEFAULTS)
    if spec:
        if spec in PRESETS:
            cfg = _merge(cfg, PRESETS[spec])
        else:
            path = Path(spec)
            if not path.exists():
                raise ConfigError(f"no preset or config file named {spec!r}")
            doc = json.loads(path.read_text())
            version = doc.get("schema_version", SCHEMA_VERSION)
            if version != SCHEMA_VERSION:
                raise ConfigError(f"config schema version {version}, expected {SCHEMA_VERSION}")
            cfg = _merge(cfg, doc)
    if overrides:
        cfg = _merge(cfg, overrides)
    validate(cfg)
    return cfg


def validate(cfg: dict):
    try:
        FrameConfig(**cfg["frame"])
        TseNetConfig(**cfg["tsenet"])
        TrainConfig(**cfg["train"], seed=cfg["seed"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if cfg["tv"]["rank"] != cfg["tsenet"]["D1"]:
        raise ConfigError(f"tv.rank ({cfg['tv']['rank']}) must equal tsenet.D1 ({cfg['tsenet']['D1']})")


def parse_assignment(text: str) -> dict:
    """'train.lr_init=0.01' -> {'train': {'lr_init': 0.01}} (value parsed as JSON when possible)."""
    if "=" not in text:
        raise ConfigError(f"expected key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out: dict = {}
    node = out
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return out


def deep_update(a: dict, b: dict) -> dict:
    for k, v in b.items():
        if isinstance(v, dict) and isinstance(a.get(k), dict):
            deep_update(a[k], v)
        else:
            a[k] = v
    return a


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def frame_config(cfg: dict) -> FrameConfig:
    return FrameConfig(**cfg["frame"])


def tsenet_config(cfg: dict) -> TseNetConfig:
    return TseNetConfig(**cfg["tsenet"])


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(**cfg["train"], seed=cfg["seed"])
