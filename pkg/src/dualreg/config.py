"""Run configuration: nested dataclasses, YAML IO, profiles, hashing.

A run is a pure function of (seed, config); the config hash recorded next
to checkpoints and logs is the sha256 of the canonical JSON form, so two
runs compare equal exactly when every knob matches.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .data import DataConfig
from .losses import LossConfig
from .model import ModelConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    split: str = "test"
    method: str = "learned"
    iterations: int | None = None

    def __post_init__(self) -> None:
        if self.method not in ("learned", "icp"):
            raise ConfigError(f"unknown eval method {self.method!r}")


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


_SECTION_TYPES = {
    "data": DataConfig,
    "model": ModelConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}

# Named presets. "paper" is the full-scale protocol; "desk" fits a short
# single-core run; "test" is sized for fast unit tests.
PROFILES: dict[str, dict] = {
    "paper": {},
    "desk": {
        "data": {
            "n_points": 256,
            "train_shapes": 8,
            "val_shapes": 4,
            "test_shapes": 4,
            "train_pairs": 8,
            "val_pairs": 4,
            "test_pairs": 4,
            "n_surface_samples": 1024,
        },
        "model": {"block_channels": [16, 16, 32, 64], "head_hidden": [128, 64]},
        "train": {"learning_rate": 1e-3, "batch_size": 8, "steps": 3000, "eval_every": 250, "checkpoint_every": 1000},
    },
    "test": {
        "data": {
            "n_points": 64,
            "train_shapes": 4,
            "val_shapes": 2,
            "test_shapes": 2,
            "train_pairs": 4,
            "val_pairs": 2,
            "test_pairs": 2,
            "n_surface_samples": 256,
        },
        "model": {"block_channels": [8, 8, 16, 16], "head_hidden": [32, 16], "iterations": 2},
        "train": {"learning_rate": 1e-3, "batch_size": 4, "steps": 20, "checkpoint_every": 10, "log_every": 5},
    },
}


def _coerce(section_cls, params: dict):
    valid = {f.name for f in fields(section_cls)}
    unknown = sorted(set(params) - valid)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section_cls.__name__}: {', '.join(unknown)}")
    try:
        return section_cls(**params)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {section_cls.__name__}: {exc}") from exc


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a mapping, got {type(raw).__name__}")
    unknown = sorted(set(raw) - set(_SECTION_TYPES))
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
    sections = {}
    for name, cls in _SECTION_TYPES.items():
        params = raw.get(name, {})
        if params is None:
            params = {}
        if not isinstance(params, dict):
            raise ConfigError(f"section {name!r} must be a mapping")
        sections[name] = _coerce(cls, params)
    return RunConfig(**sections)


def config_to_dict(cfg: RunConfig) -> dict:
    out = {}
    for name in _SECTION_TYPES:
        section = getattr(cfg, name)
        out[name] = {f.name: _plain(getattr(section, f.name)) for f in fields(section)}
    return out


def _plain(value):
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if isinstance(value, Path):
        return str(value)
    return value


def _merge(base: dict, extra: dict) -> dict:
    out = {k: dict(v) if isinstance(v, dict) else v for k, v in base.items()}
    for key, val in extra.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = val
    return out


def parse_override(text: str) -> tuple[list[str], object]:
    """Parse one ``section.key=value`` override; values use YAML syntax."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    key, _, raw_val = text.partition("=")
    parts = key.strip().split(".")
    if len(parts) != 2 or not all(parts):
        raise ConfigError(f"override key {key!r} must be section.key")
    try:
        value = yaml.safe_load(raw_val)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value {raw_val!r}: {exc}") from exc
    return parts, value


def load_config(
    path=None,
    profile: str | None = None,
    overrides: list[str] | None = None,
) -> RunConfig:
    """Resolve a run config from (profile) <- (file) <- (overrides)."""
    raw: dict = {}
    if profile is not None:
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}; have {', '.join(sorted(PROFILES))}")
        raw = _merge(raw, PROFILES[profile])
    if path is not None:
        path = Path(path)
        try:
            loaded = yaml.safe_load(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path} must contain a mapping")
        loaded.pop("_hash", None)  # provenance note written by dump_config
        raw = _merge(raw, loaded)
    for text in overrides or []:
        (section, key), value = parse_override(text)
        raw = _merge(raw, {section: {key: value}})
    return config_from_dict(raw)


def config_hash(cfg: RunConfig) -> str:
    canon = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def dump_config(cfg: RunConfig, path) -> None:
    payload = config_to_dict(cfg)
    payload["_hash"] = config_hash(cfg)
    Path(path).write_text(yaml.safe_dump(payload, sort_keys=True), encoding="utf-8")


def replace_section(cfg: RunConfig, section: str, **updates) -> RunConfig:
    """New RunConfig with one section's fields replaced."""
    if section not in _SECTION_TYPES:
        raise ConfigError(f"unknown config section {section!r}")
    new_section = dataclasses.replace(getattr(cfg, section), **updates)
    return dataclasses.replace(cfg, **{section: new_section})
