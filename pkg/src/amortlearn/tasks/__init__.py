"""Task families, splits, and regeneration from a (family, config, seed) record."""

from __future__ import annotations

import json
from typing import Any

from .base import Task, TaskData, minibatch_indices, split_minibatches
from .gmm import GMMFamily, sample_gmm_task
from .linreg import LinRegFamily, sample_linreg_task
from .projection import (
    LabeledDataset,
    ProjectionFamily,
    builtin_base_dataset,
    load_idx_dataset,
    read_idx,
    sample_projection_task,
    write_idx,
)
from .scm import SCMFamily, SCMSpec, infer_topological_order, is_valid_order, sample_scm_task

FAMILIES = {
    "linreg": LinRegFamily,
    "projection": ProjectionFamily,
    "gmm": GMMFamily,
    "scm": SCMFamily,
}


def family_from_dict(cfg: dict[str, Any]):
    """Build a family from ``{"name": ..., **fields}``; unknown fields raise."""
    cfg = dict(cfg)
    name = cfg.pop("name", None)
    if name not in FAMILIES:
        raise ValueError(f"unknown task family {name!r}; expected one of {sorted(FAMILIES)}")
    cls = FAMILIES[name]
    known = set(cls.__dataclass_fields__)
    extra = set(cfg) - known
    if extra:
        raise ValueError(f"unknown keys for family {name!r}: {sorted(extra)}")
    if "graphs" in cfg:
        cfg["graphs"] = tuple(cfg["graphs"])
    return cls(**cfg)


_SAMPLERS = {
    "linreg": lambda cfg, seed: sample_linreg_task(seed=seed, **cfg),
    "gmm": lambda cfg, seed: sample_gmm_task(seed=seed, **cfg),
    "scm": lambda cfg, seed: sample_scm_task(seed=seed, **cfg),
}


def regenerate(record: dict[str, Any]) -> Task:
    """Rebuild a task from :meth:`Task.record` output."""
    cfg = dict(record.get("config", {}))
    seed = int(record["seed"])
    if "name" in cfg:
        return family_from_dict(cfg).sample(seed)
    family = record["family"]
    if family not in _SAMPLERS:
        raise ValueError(f"cannot regenerate {family!r} task without a family config")
    return _SAMPLERS[family](cfg, seed)


def task_to_json(task: Task) -> str:
    return json.dumps(task.record(), sort_keys=True)


def task_from_json(text: str) -> Task:
    return regenerate(json.loads(text))


__all__ = [
    "FAMILIES",
    "GMMFamily",
    "LabeledDataset",
    "LinRegFamily",
    "ProjectionFamily",
    "SCMFamily",
    "SCMSpec",
    "Task",
    "TaskData",
    "builtin_base_dataset",
    "family_from_dict",
    "infer_topological_order",
    "is_valid_order",
    "load_idx_dataset",
    "minibatch_indices",
    "read_idx",
    "regenerate",
    "sample_gmm_task",
    "sample_linreg_task",
    "sample_projection_task",
    "sample_scm_task",
    "split_minibatches",
    "task_from_json",
    "task_to_json",
    "write_idx",
]
