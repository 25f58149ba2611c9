from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .base import Task, TaskData


@dataclass
class LinRegFamily:
    """y = w.x + eps with w ~ N(0, I), x ~ N(0, I), eps ~ N(0, noise_std^2)."""

    d: int = 16
    noise_std: float = 0.25
    n_train: int = 512
    n_valid: int = 128

    kind = "regression"

    @property
    def x_dim(self) -> int:
        return self.d

    @property
    def y_dim(self) -> int:
        return 1

    def sample(self, seed: int) -> Task:
        return sample_linreg_task(self.d, self.n_train, self.n_valid, seed, self.noise_std)

    def to_dict(self) -> dict:
        return {"name": "linreg", **asdict(self)}


def sample_linreg_task(d: int, n_train: int, n_valid: int, seed: int, noise_std: float = 0.25) -> Task:
    if d < 1:
        raise ValueError("d must be >= 1")
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(d)
    x = rng.standard_normal((n_train + n_valid, d))
    y = x @ w + noise_std * rng.standard_normal(n_train + n_valid)
    y = y[:, None]
    data = TaskData(x[:n_train], y[:n_train], x[n_train:], y[n_train:])
    cfg = {"d": d, "n_train": n_train, "n_valid": n_valid, "noise_std": noise_std}
    return Task("linreg", data, {"w": w}, seed, cfg)
