"""Run configuration: a schema-validated YAML document combining model,
training, sampler, and data settings. Unknown keys are rejected; dotted
``key=value`` overrides are applied before validation."""

from __future__ import annotations

import dataclasses
import os
import pathlib
from dataclasses import dataclass, field

import yaml

from .policy import ModelConfig, SamplerConfig
from .training import TrainConfig


class ConfigError(Exception):
    """Invalid, unknown, or missing configuration."""


@dataclass
class DataConfig:
    dataset_dir: str = "dataset"
    episodes_per_embodiment: int = 100
    episodes_per_shard: int = 100
    tasks: list = field(default_factory=lambda: ["reach", "carry", "kneel_place"])
    seed: int = 0
    episode_len: int = 256
    action_noise: float = 0.0  # exploration noise on executed actions


@dataclass
class RolloutConfig:
    task: str = "reach"
    episodes: int = 25
    steps: int = 100
    seed: int = 0
    replan_interval: int = 0  # 0 = one full chunk per plan
    embodiment: str = "biped-full"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    rollout: RolloutConfig = field(default_factory=RolloutConfig)
    output_dir: str = "runs/default"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, doc: dict, path: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(doc) - set(fields)
    if unknown:
        raise ConfigError(f"unknown config keys at {path or 'top level'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in doc.items():
        ftype = fields[name].type
        if dataclasses.is_dataclass(_resolve(ftype)):
            if not isinstance(value, dict):
                raise ConfigError(f"{path}{name} must be a mapping")
            kwargs[name] = _build(_resolve(ftype), value, f"{path}{name}.")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config at {path or 'top level'}: {exc}") from exc


_NESTED = {
    "model": ModelConfig,
    "train": TrainConfig,
    "sampler": SamplerConfig,
    "data": DataConfig,
    "rollout": RolloutConfig,
}


def _resolve(ftype):
    if isinstance(ftype, str):
        return {c.__name__: c for c in
                (ModelConfig, TrainConfig, SamplerConfig, DataConfig, RolloutConfig)
                }.get(ftype, str)
    return ftype


def apply_overrides(doc: dict, overrides: list) -> dict:
    """Apply ``section.key=value`` overrides; values parsed as YAML."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        node = doc
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot descend into {key!r}")
        node[parts[-1]] = yaml.safe_load(raw)
    return doc


def load_run_config(path=None, overrides=()) -> RunConfig:
    doc = {}
    if path is not None:
        p = pathlib.Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        with open(p) as f:
            doc = yaml.safe_load(f) or {}
        if not isinstance(doc, dict):
            raise ConfigError("config file must contain a mapping")
    doc = apply_overrides(doc, list(overrides))
    cfg = _build(RunConfig, doc, "")
    root = os.environ.get("PARTPOLICY_OUTPUT_ROOT")
    if root:
        cfg.output_dir = str(pathlib.Path(root) / cfg.output_dir)
    return cfg
