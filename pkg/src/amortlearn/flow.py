"""Conditional flow matching with an implicit amortizer as the vector field.

Tokens carry ``[position, time features]`` in the input slot and a vector-field
value in the output slot. Context points are data samples at ``t = 1`` with
a zero value slot. Queries are ``(x_t, t)`` with the current field estimate in
the value slot, so iterative refinement sharpens ``v(x_t, t | context)``.
The path is the linear interpolant ``x_t = (1 - t) x0 + t x1`` with target
``x1 - x0``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .amortizer import ImplicitAmortizer, RegimeConfig, build_amortizer, refine
from .sequence_model import SequenceModelConfig
from .tasks.base import Task, TaskData


@dataclass
class FlowConfig:
    interpolant: str = "linear"
    t_sampling: str = "uniform"
    n_integration_steps: int = 50
    sigma_min: float = 0.0
    n_time_features: int = 8

    def __post_init__(self):
        if self.interpolant != "linear":
            raise ValueError("only the linear interpolant is supported")
        if self.t_sampling != "uniform":
            raise ValueError("only uniform time sampling is supported")
        if self.n_integration_steps < 1:
            raise ValueError("n_integration_steps must be >= 1")
        if self.sigma_min < 0:
            raise ValueError("sigma_min must be >= 0")
        if self.n_time_features < 2 or self.n_time_features % 2:
            raise ValueError("n_time_features must be a positive even number")

    def to_dict(self) -> dict:
        return asdict(self)


def time_features(t, n_features: int = 8) -> np.ndarray:
    """Sinusoidal features ``sin/cos(pi 2^j t)`` for ``j < n_features / 2``."""
    t = np.asarray(t, dtype=np.float64)[..., None]
    freqs = np.pi * 2.0 ** np.arange(n_features // 2)
    return np.concatenate([np.sin(freqs * t), np.cos(freqs * t)], axis=-1)


def cfm_training_pair(x1: np.ndarray, rng: np.random.Generator, t=None, sigma_min: float = 0.0):
    """Draw ``(t, x_t, u_target)`` for data points ``x1`` (shape ``(n, d)``).

    ``x_t = (1 - (1 - sigma_min) t) x0 + t x1`` and
    ``u = x1 - (1 - sigma_min) x0``; with ``sigma_min = 0`` this is the plain
    linear path.
    """
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    x0 = rng.standard_normal(x1.shape)
    if t is None:
        t = rng.uniform(0.0, 1.0, size=len(x1))
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (len(x1),))
    s = 1.0 - sigma_min
    x_t = (1.0 - s * t[:, None]) * x0 + t[:, None] * x1
    u = x1 - s * x0
    return t.copy(), x_t, u


def context_inputs(points: np.ndarray, n_features: int) -> tuple[np.ndarray, np.ndarray]:
    """Context tokens: ``[x1, temb(1)]`` with a zero value slot."""
    points = np.asarray(points, dtype=np.float64)
    tf = np.broadcast_to(time_features(1.0, n_features), points.shape[:-1] + (n_features,))
    return np.concatenate([points, tf], axis=-1), np.zeros_like(points)


def query_inputs(x_t: np.ndarray, t: np.ndarray, n_features: int) -> np.ndarray:
    return np.concatenate([x_t, time_features(t, n_features)], axis=-1)


@dataclass
class FlowFamily:
    """Wraps a generative family so each sampled task carries flow-matching
    pairs: context from the task's train split, queries built from its
    valid split."""

    base: object
    flow: FlowConfig

    kind = "regression"

    @property
    def x_dim(self) -> int:
        return self.base.x_dim + self.flow.n_time_features

    @property
    def y_dim(self) -> int:
        return self.base.x_dim

    def sample(self, seed: int) -> Task:
        task = self.base.sample(seed)
        return flow_task(task, self.flow, seed)

    def to_dict(self) -> dict:
        return {"name": "flow", "base": self.base.to_dict(), "flow": self.flow.to_dict()}


def flow_task(task: Task, flow: FlowConfig, seed: int) -> Task:
    rng = np.random.default_rng([seed, 7])
    cx, cy = context_inputs(task.data.x_train, flow.n_time_features)
    t, x_t, u = cfm_training_pair(task.data.x_valid, rng, sigma_min=flow.sigma_min)
    qx = query_inputs(x_t, t, flow.n_time_features)
    data = TaskData(cx, cy, qx, u)
    return Task("flow", data, task.hidden, task.seed, {"base": task.record(), "flow": flow.to_dict()})


def build_flow_model(
    dim: int,
    seq: SequenceModelConfig,
    flow: FlowConfig,
    steps_k: int = 10,
    seed: int = 0,
    implicit_state: str = "logits",
) -> ImplicitAmortizer:
    """Implicit model whose outputs are velocities. ``pre_mlp`` carries the
    backbone output between steps, which gives refinement room to
    accumulate context beyond the ``dim``-sized velocity."""
    regime = RegimeConfig(regime="implicit", signal="data", steps_k=steps_k, implicit_state=implicit_state)
    return build_amortizer(regime, seq, dim + flow.n_time_features, dim, "regression", seed=seed)


def integrate_samples(
    model: ImplicitAmortizer,
    context: np.ndarray,
    n_samples: int,
    flow: FlowConfig,
    k: int,
    batch_size: int = 32,
    seed: int = 0,
) -> np.ndarray:
    """Euler-integrate ``n_samples`` points from noise through the amortized
    field. ``context`` is ``(N, d)`` or a stack ``(B, N, d)`` of contexts.

    The ``k`` context minibatches are drawn once and reused at every
    integration time; the field at each time is the state after ``k``
    refinement steps started from the learned initial state.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    ctx = np.asarray(context, dtype=np.float64)
    single = ctx.ndim == 2
    if single:
        ctx = ctx[None]
    b, n_ctx, dim = ctx.shape
    if dim + flow.n_time_features != model.x_dim:
        raise ValueError(f"model expects {model.x_dim - flow.n_time_features}-d points, context is {dim}-d")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((b, n_samples, dim))
    if n_samples == 0:
        return x[0] if single else x
    bs = min(batch_size, n_ctx)
    idx = [np.stack([rng.choice(n_ctx, size=bs, replace=False) for _ in range(b)]) for _ in range(k)]
    batches = []
    for ids in idx:
        pts = np.take_along_axis(ctx, ids[..., None], axis=1)
        batches.append(context_inputs(pts, flow.n_time_features))
    dt = 1.0 / flow.n_integration_steps
    for i in range(flow.n_integration_steps):
        t = np.full((b, n_samples), i * dt)
        qx = query_inputs(x, t, flow.n_time_features)
        _, _, preds = refine(model, batches, qx, keep_states=False)
        x = x + dt * preds[-1].astype(np.float64)
    return x[0] if single else x


def samples_to_csv(samples: np.ndarray) -> str:
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    dim = samples.shape[1] if samples.size else samples.shape[-1]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([f"x{j}" for j in range(dim)])
    for row in samples:
        writer.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


def read_points_csv(path: str | Path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    try:
        [float(v) for v in header]
        body = rows
    except ValueError:
        pass
    return np.array([[float(v) for v in r] for r in body], dtype=np.float64).reshape(len(body), -1)
