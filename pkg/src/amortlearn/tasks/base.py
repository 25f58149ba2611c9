from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np


@dataclass(frozen=True)
class TaskData:
    """What a model is allowed to see of a task: the two observed splits.

    ``y_*`` is ``None`` for unlabeled (generative / causal-order) families.
    """

    x_train: np.ndarray
    y_train: np.ndarray | None
    x_valid: np.ndarray
    y_valid: np.ndarray | None

    @property
    def n_train(self) -> int:
        return len(self.x_train)

    @property
    def n_valid(self) -> int:
        return len(self.x_valid)


@dataclass
class Task:
    family: str
    data: TaskData
    hidden: dict[str, Any]
    seed: int
    config: dict[str, Any] = field(default_factory=dict)

    def record(self) -> dict[str, Any]:
        """Everything needed to regenerate this task bit-for-bit."""
        return {"family": self.family, "seed": int(self.seed), "config": dict(self.config)}


def split_minibatches(data: TaskData, batch_size: int, k: int, seed: int | np.random.Generator):
    """Draw ``k`` training minibatches and return them with the validation split.

    Each batch is drawn without replacement from the train split; batches are
    independent of each other, so an example may appear in several batches.
    Returns ``(batches, valid)`` where ``batches`` is a list of ``(x, y)``
    pairs and ``valid`` is ``(x_valid, y_valid)``.
    """
    if batch_size < 1 or k < 1:
        raise ValueError("batch_size and k must be >= 1")
    if data.n_train < batch_size:
        raise ValueError(f"train split has {data.n_train} items, need at least {batch_size}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    batches = []
    for _ in range(k):
        idx = rng.choice(data.n_train, size=batch_size, replace=False)
        y = None if data.y_train is None else data.y_train[idx]
        batches.append((data.x_train[idx], y))
    return batches, (data.x_valid, data.y_valid)


def minibatch_indices(n_train: int, batch_size: int, k: int, rng: np.random.Generator) -> list[np.ndarray]:
    if n_train < batch_size:
        raise ValueError(f"train split has {n_train} items, need at least {batch_size}")
    return [rng.choice(n_train, size=batch_size, replace=False) for _ in range(k)]
