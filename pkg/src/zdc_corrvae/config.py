"""Run configuration: one JSON document, defaults filled, unknown keys rejected."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any

from .datasets import ToyShowerConfig
from .inference import WOptimizerConfig
from .model import ModelConfig, default_mask, validate_mask
from .physics import PropertySpec
from .training import LossWeights, TrainConfig


class ConfigError(ValueError):
    pass


def _defaults() -> dict:
    model = ModelConfig().to_json()
    model.pop("property_spec")
    spec = PropertySpec()
    return {
        "data": {
            "path": None,
            "synth": {"n": 5000, "seed": 0, "config": ToyShowerConfig().to_json()},
            "split": {"fractions": [0.8, 0.1, 0.1], "seed": 0},
        },
        "model": model,
        "train": {**asdict(TrainConfig()), "loss_weights": asdict(LossWeights())},
        "properties": {"names": spec.names, "scales": None, "offsets": None, "mask": None},
        "inference": asdict(WOptimizerConfig()),
        "evaluation": {
            "seed": 0,
            "n_generated": 1000,
            "traversal_contexts": 10,
            "traversal_values": {"from": -2.0, "to": 2.0, "steps": 11},
            "probe_draws": 50,
            "postproc_threshold": None,
        },
        "output": {"dir": None},
    }


DEFAULTS = _defaults()

# Sections whose values may be null in the defaults but hold objects/lists when set.
_FREE_VALUES = {("data", "path"), ("properties", "mask"), ("properties", "scales"),
                ("properties", "offsets"), ("output", "dir"), ("evaluation", "postproc_threshold")}


def _merge(defaults: dict, user: dict, path: tuple = ()) -> dict:
    if not isinstance(user, dict):
        raise ConfigError(f"{'.'.join(path) or 'config'} must be an object")
    unknown = sorted(set(user) - set(defaults))
    if unknown:
        where = ".".join(path) or "top level"
        raise ConfigError(f"unknown config key(s) at {where}: {', '.join(unknown)}")
    out = copy.deepcopy(defaults)
    for key, value in user.items():
        if isinstance(defaults[key], dict) and (*path, key) not in _FREE_VALUES:
            out[key] = _merge(defaults[key], value, (*path, key))
        else:
            out[key] = value
    return out


def resolve_config(user: dict | None = None) -> dict:
    """Defaults overlaid with ``user``; validates every section by building it."""
    cfg = _merge(DEFAULTS, user or {})
    spec = property_spec(cfg)
    cfg["properties"]["scales"], cfg["properties"]["offsets"] = spec.scales, spec.offsets
    mc = build_model_config(cfg)
    if cfg["properties"]["mask"] is None:
        cfg["properties"]["mask"] = default_mask(spec.n_properties, mc.dim_w).astype(int).tolist()
    try:
        validate_mask(cfg["properties"]["mask"], spec.n_properties, mc.dim_w)
    except ValueError as exc:
        raise ConfigError(f"invalid properties.mask: {exc}") from exc
    build_train_configs(cfg)
    build_wopt(cfg)
    ToyShowerConfig(**cfg["data"]["synth"]["config"])
    return cfg


def load_config(path: str | Path | None) -> dict:
    if path is None:
        return resolve_config({})
    try:
        user = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return resolve_config(user)


def write_config(cfg: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def _build(cls, data: dict, section: str):
    names = {f.name for f in fields(cls)}
    try:
        return cls(**{k: v for k, v in data.items() if k in names})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section} section: {exc}") from exc


def property_spec(cfg: dict) -> PropertySpec:
    p = cfg["properties"]
    try:
        return PropertySpec(p["names"], p["scales"], p["offsets"])
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"invalid properties section: {exc}") from exc


def build_model_config(cfg: dict) -> ModelConfig:
    return _build(ModelConfig, {**cfg["model"], "property_spec": property_spec(cfg)}, "model")


def build_train_configs(cfg: dict) -> tuple[TrainConfig, LossWeights]:
    t = dict(cfg["train"])
    weights = _build(LossWeights, t.pop("loss_weights"), "train.loss_weights")
    return _build(TrainConfig, t, "train"), weights


def build_wopt(cfg: dict) -> WOptimizerConfig:
    return _build(WOptimizerConfig, cfg["inference"], "inference")


def mask_of(cfg: dict) -> Any:
    return cfg["properties"]["mask"]
