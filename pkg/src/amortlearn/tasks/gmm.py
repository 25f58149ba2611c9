from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .base import Task, TaskData


def sample_from_mixture(means: np.ndarray, std: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """Equal-weight isotropic Gaussian mixture."""
    comp = rng.integers(0, len(means), size=n)
    return means[comp] + std * rng.standard_normal((n, means.shape[1]))


def sample_gmm_task(
    dim: int,
    k_max: int,
    n_train: int,
    seed: int,
    n_valid: int = 128,
    mean_std: float = 5.0,
    component_std: float = 0.3,
) -> Task:
    """Mixture with ``U{1..k_max}`` components, means ~ N(0, mean_std^2 I)."""
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    if dim < 1:
        raise ValueError("dim must be >= 1")
    rng = np.random.default_rng(seed)
    n_comp = int(rng.integers(1, k_max + 1))
    means = mean_std * rng.standard_normal((n_comp, dim))
    pts = sample_from_mixture(means, component_std, n_train + n_valid, rng)
    data = TaskData(pts[:n_train], None, pts[n_train:], None)
    hidden = {"means": means, "std": component_std, "n_components": n_comp}
    cfg = {"dim": dim, "k_max": k_max, "n_train": n_train, "n_valid": n_valid, "mean_std": mean_std, "component_std": component_std}
    return Task("gmm", data, hidden, seed, cfg)


@dataclass
class GMMFamily:
    dim: int = 2
    k_max: int = 5
    n_train: int = 512
    n_valid: int = 128
    mean_std: float = 5.0
    component_std: float = 0.3

    kind = "generative"

    @property
    def x_dim(self) -> int:
        return self.dim

    @property
    def y_dim(self) -> int:
        return 0

    def sample(self, seed: int) -> Task:
        return sample_gmm_task(self.dim, self.k_max, self.n_train, seed, self.n_valid, self.mean_std, self.component_std)

    def to_dict(self) -> dict:
        return {"name": "gmm", **asdict(self)}
