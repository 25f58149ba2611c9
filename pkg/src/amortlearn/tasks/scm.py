"""Structural causal model tasks and recursive leaf-removal ordering.

Graph samplers: Erdos-Renyi (edge probability 2/(d-1)) and scale-free
preferential attachment with one parent per new node. Mechanisms: linear
(LIN) and random Fourier features (RFF). Noise: Gaussian or Laplace with a
per-node scale drawn from U(0.5, 2).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .base import Task, TaskData

LIN_IN = {"weight": [(1.0, 3.0)], "bias": (-3.0, 3.0)}
LIN_OUT = {"weight": [(0.5, 2.0), (2.0, 4.0)], "bias": (-3.0, 3.0)}
RFF_IN = {"length": (7.0, 10.0), "output": [(5.0, 8.0), (8.0, 12.0)], "bias": (-3.0, 3.0)}
RFF_OUT = {"length": (10.0, 20.0), "output": [(8.0, 12.0), (18.0, 22.0)], "bias": (-3.0, 3.0)}
NOISE_SCALE = (0.5, 2.0)


@dataclass
class SCMSpec:
    """``adjacency[i, j] = 1`` means an edge i -> j (i is a parent of j)."""

    adjacency: np.ndarray
    mechanism: str
    params: list[dict]
    noise: str
    noise_scale: np.ndarray
    order: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    @property
    def d(self) -> int:
        return self.adjacency.shape[0]

    def parents(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.adjacency[:, j])

    def edges(self) -> list[tuple[int, int]]:
        return [(int(i), int(j)) for i, j in zip(*np.nonzero(self.adjacency))]


def _union_uniform(rng: np.random.Generator, intervals, size=None):
    """Uniform over a union of equal-weighted intervals."""
    pick = rng.integers(0, len(intervals), size=size)
    lo = np.array([iv[0] for iv in intervals])[pick]
    hi = np.array([iv[1] for iv in intervals])[pick]
    return rng.uniform(lo, hi)


def _signed(rng: np.random.Generator, intervals, size):
    mag = _union_uniform(rng, intervals, size=size)
    return mag * rng.choice([-1.0, 1.0], size=size)


def sample_dag(d: int, graph: str, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Return (adjacency, order). ``order`` lists nodes parents-first."""
    order = rng.permutation(d)
    adj = np.zeros((d, d), dtype=np.int8)
    if graph == "ER":
        p = min(1.0, 2.0 / max(d - 1, 1))
        for a in range(d):
            for b in range(a + 1, d):
                if rng.random() < p:
                    adj[order[a], order[b]] = 1
    elif graph == "SF":
        degree = np.zeros(d)
        for t in range(1, d):
            w = degree[:t] + 1.0
            src = rng.choice(t, p=w / w.sum())
            adj[order[src], order[t]] = 1
            degree[src] += 1
            degree[t] += 1
    else:
        raise ValueError(f"unknown graph family {graph!r}")
    return adj, order


def is_valid_order(adjacency: np.ndarray, order) -> bool:
    pos = np.empty(adjacency.shape[0], dtype=int)
    pos[np.asarray(order)] = np.arange(adjacency.shape[0])
    src, dst = np.nonzero(adjacency)
    return bool(np.all(pos[src] < pos[dst]))


def sample_scm_task(
    d: int,
    mechanism: str = "LIN",
    graph: str = "ER",
    noise: str = "gaussian",
    n: int = 400,
    seed: int = 0,
    ood: bool = False,
    n_valid: int = 0,
    rff_features: int = 16,
) -> Task:
    if d < 2:
        raise ValueError("SCM tasks need d >= 2")
    rng = np.random.default_rng(seed)
    adj, order = sample_dag(d, graph, rng)
    assert is_valid_order(adj, order), "ancestral order violated"
    params: list[dict] = []
    for j in range(d):
        pa = np.flatnonzero(adj[:, j])
        if mechanism == "LIN":
            ranges = LIN_OUT if ood else LIN_IN
            params.append({"weights": _signed(rng, ranges["weight"], pa.size), "bias": float(rng.uniform(*ranges["bias"]))})
        elif mechanism == "RFF":
            ranges = RFF_OUT if ood else RFF_IN
            length = rng.uniform(*ranges["length"])
            params.append(
                {
                    "omega": rng.standard_normal((rff_features, pa.size)) / length,
                    "phase": rng.uniform(0.0, 2 * np.pi, size=rff_features),
                    "amp": rng.standard_normal(rff_features) * np.sqrt(2.0 / rff_features),
                    "scale": float(_union_uniform(rng, ranges["output"])),
                    "bias": float(rng.uniform(*ranges["bias"])),
                }
            )
        else:
            raise ValueError(f"unknown mechanism {mechanism!r}")
    noise_scale = rng.uniform(*NOISE_SCALE, size=d)
    spec = SCMSpec(adj, mechanism, params, noise, noise_scale, order)
    data = simulate(spec, n + n_valid, rng)
    task_data = TaskData(data[:n], None, data[n:], None)
    cfg = {"d": d, "mechanism": mechanism, "graph": graph, "noise": noise, "n": n, "ood": ood, "n_valid": n_valid, "rff_features": rff_features}
    return Task("scm", task_data, {"scm": spec}, seed, cfg)


def simulate(spec: SCMSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """Ancestral sampling in the stored order."""
    x = np.zeros((n, spec.d))
    for j in spec.order:
        pa = spec.parents(j)
        if spec.noise == "gaussian":
            eps = rng.standard_normal(n)
        elif spec.noise == "laplace":
            eps = rng.laplace(0.0, 1.0 / np.sqrt(2.0), size=n)
        else:
            raise ValueError(f"unknown noise {spec.noise!r}")
        p = spec.params[j]
        if spec.mechanism == "LIN":
            f = x[:, pa] @ p["weights"] if pa.size else 0.0
        else:
            f = p["scale"] * (np.cos(x[:, pa] @ p["omega"].T + p["phase"]) @ p["amp"]) if pa.size else 0.0
        x[:, j] = f + p["bias"] + spec.noise_scale[j] * eps
    return x


def leaves(adjacency: np.ndarray, active) -> np.ndarray:
    """Active nodes with no outgoing edge into the active set."""
    active = np.asarray(active)
    sub = adjacency[np.ix_(active, active)]
    return active[sub.sum(axis=1) == 0]


def infer_topological_order(leaf_scores: Callable[[np.ndarray, np.ndarray], np.ndarray], data: np.ndarray) -> np.ndarray:
    """Recursive leaf removal.

    ``leaf_scores(data_subset, active_nodes)`` returns one score per active
    node; the argmax (lowest index on ties) is removed each round. The
    removal sequence reversed is the predicted order, parents first.
    """
    d = data.shape[1]
    active = np.arange(d)
    removed: list[int] = []
    while active.size > 1:
        scores = np.asarray(leaf_scores(data[:, active], active), dtype=float)
        if scores.shape != (active.size,):
            raise ValueError("leaf scorer must return one score per active node")
        pick = int(np.argmax(scores))
        removed.append(int(active[pick]))
        active = np.delete(active, pick)
    removed.append(int(active[0]))
    return np.array(removed[::-1])


@dataclass
class SCMFamily:
    d: int = 5
    mechanism: str = "LIN"
    graphs: tuple = ("ER", "SF")
    noise: str = "gaussian"
    n: int = 400
    ood: bool = False
    rff_features: int = 16

    kind = "causal_order"

    @property
    def x_dim(self) -> int:
        return self.d

    @property
    def y_dim(self) -> int:
        return 0

    def sample(self, seed: int) -> Task:
        graph = self.graphs[seed % len(self.graphs)]
        return sample_scm_task(self.d, self.mechanism, graph, self.noise, self.n, seed, self.ood, rff_features=self.rff_features)

    def to_dict(self) -> dict:
        out = {"name": "scm", **asdict(self)}
        out["graphs"] = list(self.graphs)
        return out
