"""Experiment configuration: defaults, schema validation and YAML loading."""

from __future__ import annotations

import copy
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import jsonschema
import yaml

from .errors import ConfigError

DEFAULTS: dict = {
    "seed": 42,
    "threads": 1,
    "chirp": {"f_start": 19000.0, "f_end": 23000.0, "sweep_duration": 0.025,
              "emission_period": 0.05, "sample_rate": 48000.0, "amplitude": 1.0},
    "data": {
        "persons_per_domain": 2,
        "reps": 10,
        "duration": 1.0,
        "frame_len": 0.25,
        "shared_persons": False,
        "domains": [{"name": "source"}, {"name": "target"}],
    },
    "features": {"max_freq": 1000.0, "log": True, "standardize": True},
    "augment": {"enabled": False, "mode": "inter", "Dis": 4, "K": 4, "w": 0.5, "exponent": 0.5},
    "model": {"memory_slots": 64, "embed_dim": 128, "proj_hidden": 128, "proj_dim": 64,
              "attention_norm": "double_norm", "convs": None},
    "train": {"lr": 0.1, "momentum": 0.9, "objective": "combined", "pretrain_max_epochs": 40,
              "pretrain_batch": 64, "plateau_tol": 1e-3, "plateau_window": 5, "tau": 0.07},
    "adapt": {"enabled": True, "epochs": 10, "iterations_per_epoch": 20, "batch_source": 64,
              "batch_target": 64, "mad_threshold": 3.5},
    "classifier": {"hidden": 256, "epochs": 200, "lr": 0.1, "batch_size": 64},
    "eval": {"case": "leave_one_place_out", "held_out": ["target"], "test_fraction": 0.2,
             "train_group": None, "small_train_persons": 1},
}

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_int1 = {"type": "integer", "minimum": 1}
_int0 = {"type": "integer", "minimum": 0}
_bool = {"type": "boolean"}
_ids = {"type": ["array", "null"], "items": {"type": "string"}}

_PROFILE = {
    "type": "object",
    "required": ["name"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string", "minLength": 1},
        "distance_offset": _num, "amplitude_scale": {"type": "number", "minimum": 0},
        "freq_scale": _pos, "phase_offset": _num,
        "class_offsets": {"type": "object", "additionalProperties": {
            "type": "object", "additionalProperties": _num,
            "propertyNames": {"enum": ["distance", "amplitude", "phase"]}}},
        "clutter_intensity": {"type": "number", "minimum": 0}, "mask": _bool,
        "ambient_noise": {"type": "number", "minimum": 0}, "inband_noise": {"type": "number", "minimum": 0},
        "ambient_noise_scale": {"type": "number", "minimum": 0},
        "inband_noise_scale": {"type": "number", "minimum": 0},
        "direct_path_gain": {"type": "number", "minimum": 0},
        "distance_jitter": {"type": "number", "minimum": 0},
    },
}


def _section(props, required=()):
    return {"type": "object", "additionalProperties": False, "properties": props,
            "required": list(required)}


SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "seed": _int0,
        "threads": _int1,
        "chirp": _section({k: _pos for k in DEFAULTS["chirp"]}),
        "data": _section({
            "persons_per_domain": _int1, "reps": _int1, "duration": _pos, "frame_len": _pos,
            "shared_persons": _bool,
            "domains": {"type": "array", "minItems": 1, "items": _PROFILE},
        }),
        "features": _section({"max_freq": _pos, "log": _bool, "standardize": _bool}),
        "augment": _section({"enabled": _bool, "mode": {"enum": ["intra", "inter"]}, "Dis": _int1,
                             "K": {"type": "integer", "minimum": 2, "multipleOf": 2},
                             "w": {"type": "number", "minimum": 0, "maximum": 1}, "exponent": _num}),
        "model": _section({"memory_slots": _int1, "embed_dim": _int1, "proj_hidden": _int1,
                           "proj_dim": _int1, "attention_norm": {"enum": ["double_norm", "softmax_only"]},
                           "convs": {"type": ["array", "null"], "items": _section({
                               "channels": _int1,
                               "kernel": {"type": "array", "items": _int1, "minItems": 2, "maxItems": 2},
                               "stride": {"type": "array", "items": _int1, "minItems": 2, "maxItems": 2},
                           }, ["channels"])}}),
        "train": _section({"lr": {"type": "number", "minimum": 0},
                           "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                           "objective": {"enum": ["combined", "ce", "supcon"]},
                           "pretrain_max_epochs": _int0, "pretrain_batch": _int1,
                           "plateau_tol": {"type": "number", "minimum": 0}, "plateau_window": _int1,
                           "tau": _pos}),
        "adapt": _section({"enabled": _bool, "epochs": _int0, "iterations_per_epoch": _int1,
                           "batch_source": _int1, "batch_target": _int1, "mad_threshold": _num}),
        "classifier": _section({"hidden": _int1, "epochs": _int1, "lr": _pos, "batch_size": _int1}),
        "eval": _section({"case": {"type": "string"}, "held_out": _ids, "test_fraction": _pos,
                          "train_group": _ids, "small_train_persons": _int1}),
    },
}


def deep_merge(base: Mapping, override: Mapping) -> dict:
    out = copy.deepcopy(dict(base))
    for k, v in (override or {}).items():
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate(cfg: Mapping) -> None:
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from None
    names = [d["name"] for d in cfg["data"]["domains"]]
    if len(set(names)) != len(names):
        raise ConfigError("domain names must be unique")


def resolve(overrides: Mapping | None = None) -> dict:
    """Defaults merged with ``overrides``, validated."""
    cfg = deep_merge(DEFAULTS, overrides or {})
    validate(cfg)
    return cfg


def bundled_config_path(name: str) -> Path:
    return Path(str(resources.files("efl") / "configs" / f"{name}.yaml"))


def load_config(source: Any = None) -> dict:
    """Load a YAML file, a bundled config name (``quickstart``, ``benchmark``) or a dict."""
    if source is None:
        return resolve({})
    if isinstance(source, Mapping):
        return resolve(source)
    path = Path(source)
    if not path.exists() and bundled_config_path(str(source)).exists():
        path = bundled_config_path(str(source))
    if not path.exists():
        raise ConfigError(f"config file {source} not found")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    if not isinstance(data, Mapping):
        raise ConfigError(f"{path}: top level must be a mapping")
    return resolve(data)


def dump_config(cfg: Mapping) -> str:
    return yaml.safe_dump(dict(cfg), sort_keys=True, default_flow_style=False)
