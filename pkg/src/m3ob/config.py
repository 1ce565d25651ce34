"""Run configuration: nested JSON with defaults for every key."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Any, Iterable

ABLATION_FLAGS = ("img", "text", "irg", "strg", "mup", "cma")

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "run": {"variant": "full"},
    "data": {
        "dir": None,
        "checkins": None,
        "hierarchy": None,
        "images": None,
        "weather": None,
        "timezone_offset_minutes": 0,
        "fixpoint_filter": False,
    },
    "synth": {
        "n_users": 20,
        "n_locations": 50,
        "n_categories": 24,
        "n_activities": 12,
        "days": 30,
        "visits_per_day": 6,
        "skew": 1.0,
        "rain_probability": 0.3,
        "cold_probability": 0.2,
        "image_dim": 64,
        "n_regions": 4,
        "routines_per_user": 3,
        "noise": 0.02,
        "skip": 0.02,
        "start_date": "2012-04-02",
    },
    "kg": {"margin": 1.0, "epochs": 50, "lr": 0.01, "neg_per_pos": 1, "batch_size": 512},
    "graph": {"k": 20, "gcn_layers": 1, "activation": "relu"},
    "image": {"scales": ["coarse", "medium", "fine"], "proj_layers": 1},
    "fusion": {"alpha": 0.8},
    "model": {
        "dim": 64,
        "layers": 2,
        "heads": 4,
        "dropout": 0.3,
        "max_seq_len": 32,
        "time_dim": 16,
        "ff_dim": None,
        "freeze_kg": True,
    },
    "training": {
        "epochs": 75,
        "batch_size": 128,
        "lr": 1e-4,
        "l2": 1e-3,
        "lambda_t": 10.0,
        "lambda_con": 1.0,
        "last_position_only": False,
        "select_best": True,
    },
    "ablation": {flag: True for flag in ABLATION_FLAGS},
    "eval": {"ks": [1, 5, 10, 20]},
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, update: dict, path: str = "") -> None:
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            _merge(base[key], value, where + ".")
        else:
            base[key] = value


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def set_dotted(cfg: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = cfg
    for i, k in enumerate(keys[:-1]):
        if k not in node or not isinstance(node[k], dict):
            raise ConfigError(f"unknown config key {'.'.join(keys[: i + 1])!r}")
        node = node[k]
    if keys[-1] not in node or isinstance(node[keys[-1]], dict):
        raise ConfigError(f"unknown config key {dotted!r}")
    node[keys[-1]] = value


def get_dotted(cfg: dict, dotted: str) -> Any:
    node = cfg
    for k in dotted.split("."):
        node = node[k]
    return node


def resolve(document: dict | None = None, overrides: Iterable[str] = ()) -> dict:
    """Defaults, then the JSON document, then ``key=value`` overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if document:
        _merge(cfg, document)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        set_dotted(cfg, key.strip(), _parse_value(value))
    validate(cfg)
    return cfg


def load_config(path: str | Path | None = None, overrides: Iterable[str] = ()) -> dict:
    document = None
    if path is not None:
        try:
            document = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(document, dict):
            raise ConfigError(f"{path}: top level must be an object")
    return resolve(document, overrides)


def validate(cfg: dict) -> None:
    alpha = cfg["fusion"]["alpha"]
    if not isinstance(alpha, (int, float)) or not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"fusion.alpha must lie in [0, 1], got {alpha!r}")
    for key in ("lambda_t", "lambda_con"):
        if cfg["training"][key] < 0:
            raise ConfigError(f"training.{key} must be non-negative")
    m = cfg["model"]
    d_r = 4 * m["dim"]
    if d_r % m["heads"] or (3 * m["dim"]) % m["heads"]:
        raise ConfigError("model.dim must make the record width divisible by model.heads")
    if m["time_dim"] < 2:
        raise ConfigError("model.time_dim must be at least 2")
    if cfg["graph"]["k"] < 1:
        raise ConfigError("graph.k must be at least 1")
    scales = cfg["image"]["scales"]
    if not scales or any(s not in ("coarse", "medium", "fine") for s in scales):
        raise ConfigError(f"image.scales must be a non-empty subset of coarse/medium/fine, got {scales}")
    for flag in ABLATION_FLAGS:
        if not isinstance(cfg["ablation"][flag], bool):
            raise ConfigError(f"ablation.{flag} must be true or false")


def effective_flags(cfg: dict) -> dict[str, bool]:
    """Ablation flags after the cascade rule: no relational graph means no image graph."""
    flags = dict(cfg["ablation"])
    if not flags["strg"]:
        flags["irg"] = False
    return flags


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def dumps(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True)
