"""Versioned YAML experiment configs.

A config file is a YAML mapping::

    version: 1
    seed: 0
    output_dir: runs/linreg
    task: {name: linreg, d: 16}
    model: {d_model: 64, n_layers: 2, masking_scheme: causal}
    regime: {regime: parametric, signal: data, steps_k: 10}
    train: {total_updates: 2000, learning_rate: 0.001}
    eval: {n_tasks: 20, k_values: [1, 5, 10]}

Unknown keys anywhere are errors. ``flow`` (GMM tasks) and ``leaf`` (SCM
tasks) sections configure the generative and causal-order pipelines.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .amortizer import RegimeConfig
from .flow import FlowConfig
from .scm_model import LeafModelConfig
from .sequence_model import SequenceModelConfig
from .tasks import family_from_dict
from .trainer import TrainConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    n_tasks: int = 20
    k_values: list[int] = field(default_factory=lambda: [1, 5, 10])
    batch_size: int | None = None
    ood_task: dict | None = None
    n_samples: int = 128

    def __post_init__(self):
        if self.n_tasks < 1:
            raise ValueError("n_tasks must be >= 1")
        if not self.k_values or min(self.k_values) < 0:
            raise ValueError("k_values must be non-empty and non-negative")


@dataclass
class ExperimentConfig:
    task: dict
    model: SequenceModelConfig = field(default_factory=SequenceModelConfig)
    regime: RegimeConfig = field(default_factory=RegimeConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    flow: FlowConfig | None = None
    leaf: LeafModelConfig | None = None
    output_dir: str = "runs/default"
    seed: int = 0
    version: int = CONFIG_VERSION

    @property
    def task_name(self) -> str:
        return self.task["name"]

    def family(self):
        return family_from_dict(self.task)

    def ood_family(self):
        return family_from_dict(self.eval.ood_task) if self.eval.ood_task else None

    def to_dict(self) -> dict:
        out = {
            "version": self.version,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "task": dict(self.task),
            "model": self.model.to_dict(),
            "regime": self.regime.to_dict(),
            "train": self.train.to_dict(),
            "eval": dataclasses.asdict(self.eval),
        }
        if self.flow is not None:
            out["flow"] = self.flow.to_dict()
        if self.leaf is not None:
            out["leaf"] = self.leaf.to_dict()
        return out


_SECTIONS = {
    "model": SequenceModelConfig,
    "regime": RegimeConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
    "flow": FlowConfig,
    "leaf": LeafModelConfig,
}
_TOP_LEVEL = set(_SECTIONS) | {"version", "seed", "output_dir", "task"}


def _build(cls, section: str, values: Any):
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    extra = set(values) - known
    if extra:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(extra)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section!r} section: {exc}") from exc


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    extra = set(raw) - _TOP_LEVEL
    if extra:
        raise ConfigError(f"unknown top-level keys: {sorted(extra)}")
    version = raw.get("version")
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version!r} (expected {CONFIG_VERSION})")
    if "task" not in raw or not isinstance(raw["task"], dict):
        raise ConfigError("a 'task' mapping with a 'name' is required")
    try:
        family_from_dict(raw["task"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid task: {exc}") from exc
    sections = {name: _build(cls, name, raw.get(name)) for name, cls in _SECTIONS.items() if name in raw or name in ("model", "regime", "train", "eval")}
    seed = raw.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    cfg = ExperimentConfig(
        task=dict(raw["task"]),
        output_dir=str(raw.get("output_dir", "runs/default")),
        seed=seed,
        version=version,
        **sections,
    )
    if cfg.eval.ood_task is not None:
        try:
            family_from_dict(cfg.eval.ood_task)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid eval.ood_task: {exc}") from exc
    if cfg.task_name == "gmm" and cfg.flow is None:
        cfg.flow = FlowConfig()
    if cfg.task_name == "scm" and cfg.leaf is None:
        cfg.leaf = LeafModelConfig()
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    return config_from_dict(raw)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
