"""Greedy meta-training, baselines, and attention-cost accounting.

Each update samples ``meta_batch`` tasks and runs ``K`` refinement steps.
Step ``t`` starts from the stop-gradient of the previous state, so the loss
of step ``t`` only trains the map that produced it; gradients of the ``K``
losses (each scaled by ``1/K``) are accumulated before one optimizer step.
The learned initial state is trained by its own loss with the same weight.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .amortizer import (
    Amortizer,
    ImplicitAmortizer,
    RegimeConfig,
    _pad_history,
    build_amortizer,
    fixed_predict,
    per_task_loss,
    task_batches,
)
from .optim import Adam, clip_global_norm
from .sequence_model import SequenceModelConfig, count_attention_pairs, sample_noncausal_context

EVAL_SEED_OFFSET = 2**31


class NumericFailure(RuntimeError):
    """Raised after too many consecutive non-finite updates."""


@dataclass
class TrainConfig:
    outer_optimizer: str = "adam"
    learning_rate: float = 3e-4
    meta_batch: int = 8
    refinement_steps: int = 10
    max_context: int = 32
    n_queries: int = 32
    grad_clip: float | None = 1.0
    total_updates: int = 2000
    seed: int = 0
    fixed_context: int | None = None
    final_only: bool = False
    max_skips: int = 10
    checkpoint_every: int = 0
    lr_schedule: str = "constant"

    def __post_init__(self):
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be 'constant' or 'cosine'")
        if self.outer_optimizer != "adam":
            raise ValueError("only the adam outer optimizer is supported")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.refinement_steps < 1:
            raise ValueError("refinement_steps must be >= 1")
        if self.meta_batch < 1 or self.max_context < 1 or self.n_queries < 1:
            raise ValueError("meta_batch, max_context and n_queries must be >= 1")
        if self.fixed_context is not None and not 1 <= self.fixed_context <= self.max_context:
            raise ValueError("fixed_context must lie in [1, max_context]")

    def to_dict(self) -> dict:
        return asdict(self)


def learning_rate_at(cfg: TrainConfig, update: int) -> float:
    """Cosine decays to 10% of the base rate at ``total_updates``."""
    if cfg.lr_schedule == "constant":
        return cfg.learning_rate
    frac = min(update / max(cfg.total_updates, 1), 1.0)
    return cfg.learning_rate * (0.1 + 0.45 * (1.0 + np.cos(np.pi * frac)))


def update_rng(seed: int, update: int) -> np.random.Generator:
    """Every update draws from its own stream, so resuming needs no RNG state."""
    return np.random.default_rng([seed, update])


def sample_meta_batch(family, cfg: TrainConfig, rng: np.random.Generator):
    seeds = rng.integers(0, EVAL_SEED_OFFSET, size=cfg.meta_batch)
    return [family.sample(int(s)) for s in seeds]


def _queries(datas, n_queries: int, rng: np.random.Generator, kind: str):
    qx, qy = [], []
    for d in datas:
        idx = rng.choice(d.n_valid, size=min(n_queries, d.n_valid), replace=False)
        qx.append(d.x_valid[idx])
        qy.append(d.y_valid[idx])
    qx, qy = np.stack(qx), np.stack(qy)
    if kind == "regression" and qy.ndim == 2:
        qy = qy[..., None]
    return qx, qy


def _step_loss(model: Amortizer, res, qy, prefixes: bool):
    if prefixes and res.prefix_preds is not None:
        return model.loss(res.prefix_preds, qy[:, None])
    return model.loss(res.preds, qy)


def greedy_train_step(
    model: Amortizer,
    datas,
    cfg: TrainConfig,
    opt: Adam | None,
    rng: np.random.Generator,
) -> dict:
    """One meta-update. Returns the mean step loss and diagnostics.

    With ``opt=None`` gradients are accumulated on the parameters but not
    applied (used by tests).
    """
    params = model.parameters()
    for p in params.values():
        p.grad = None
    k = cfg.refinement_steps
    causal = model.causal
    n = cfg.max_context if causal else (cfg.fixed_context or sample_noncausal_context(rng, cfg.max_context))
    batches = task_batches(datas, n, k, rng)
    qx, qy = _queries(datas, cfg.n_queries, rng, model.kind)
    implicit = isinstance(model, ImplicitAmortizer)
    prefixes = rng.integers(1, n + 1, size=qx.shape[1]) if (implicit and causal) else None
    window = model.regime.history_window

    init = model.initial(len(datas), qx)
    init_loss = model.loss(init.preds, qy)
    ad.backward(init_loss * (1.0 / k), accumulate=True)
    state = ad.stop_gradient(init.state)
    history: list = []
    first = None
    step_losses = []
    for t, (bx, by) in enumerate(batches):
        if implicit:
            res = model.step(state, bx, by, qx, prefixes=prefixes)
            loss = model.loss(res.preds, qy)
        else:
            grad = model.signal_gradient(state, bx, by) if model.regime.uses_grad else None
            if first is None:
                first = (state, grad)
            hist = _pad_history(history, window, first)
            res = model.step(state, bx, by, qx, prefixes=causal, history=hist, grad=grad)
            history.append((state, grad))
            loss = _step_loss(model, res, qy, causal)
        weight = 0.0 if (cfg.final_only and t < k - 1) else (1.0 if cfg.final_only else 1.0 / k)
        if weight:
            ad.backward(loss * weight, accumulate=True)
        elif not np.isfinite(loss.data).all():
            raise FloatingPointError("non-finite loss")
        step_losses.append(float(loss.data))
        state = ad.stop_gradient(res.state)
    grads = {name: (p.grad if p.grad is not None else np.zeros_like(p.data)) for name, p in params.items()}
    norm = clip_global_norm(grads, cfg.grad_clip)
    if opt is not None:
        opt.step(grads)
    return {
        "loss": float(np.mean(step_losses)),
        "step_losses": step_losses,
        "init_loss": float(init_loss.data),
        "n_context": int(n),
        "grad_norm": norm,
    }


def _write_jsonl(path: Path, record: dict) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
        fh.flush()


@dataclass
class Trainer:
    """Owns the model, optimizer and update counter for one training run."""

    model: Amortizer
    family: object
    cfg: TrainConfig
    metrics_path: Path | None = None
    timings_path: Path | None = None
    on_checkpoint: Callable[["Trainer"], None] | None = None
    update: int = 0
    history: list = field(default_factory=list)

    def __post_init__(self):
        self.opt = Adam(self.model.parameters(), lr=self.cfg.learning_rate)
        self._skips = 0

    def run(self, n_updates: int | None = None) -> list[dict]:
        target = self.cfg.total_updates if n_updates is None else self.update + n_updates
        while self.update < target:
            rng = update_rng(self.cfg.seed, self.update)
            self.opt.lr = learning_rate_at(self.cfg, self.update)
            t0 = time.perf_counter()
            try:
                info = self.one_update(rng)
                self._skips = 0
            except FloatingPointError as exc:
                self._skips += 1
                info = {"loss": None, "skipped": True, "reason": str(exc)}
                if self._skips >= self.cfg.max_skips:
                    self._log(info, time.perf_counter() - t0)
                    raise NumericFailure(f"{self._skips} consecutive non-finite updates") from exc
            self._log(info, time.perf_counter() - t0)
            if self.on_checkpoint and self.cfg.checkpoint_every and self.update % self.cfg.checkpoint_every == 0:
                self.on_checkpoint(self)
        return self.history

    def one_update(self, rng: np.random.Generator) -> dict:
        datas = [t.data for t in sample_meta_batch(self.family, self.cfg, rng)]
        return greedy_train_step(self.model, datas, self.cfg, self.opt, rng)

    def _log(self, info: dict, seconds: float) -> None:
        record = {"update": self.update, **{k: v for k, v in info.items() if k != "grad_norm"}}
        if "grad_norm" in info:
            record["grad_norm"] = round(info["grad_norm"], 8)
        self.history.append(record)
        self.update += 1
        if self.metrics_path is not None:
            _write_jsonl(self.metrics_path, record)
        if self.timings_path is not None:
            _write_jsonl(self.timings_path, {"update": record["update"], "seconds": seconds})


def train_causal(model: Amortizer, family, cfg: TrainConfig, **kwargs) -> Trainer:
    if not model.causal:
        raise ValueError("train_causal needs a model built with masking_scheme='causal'")
    trainer = Trainer(model, family, cfg, **kwargs)
    trainer.run()
    return trainer


def train_noncausal(model: Amortizer, family, cfg: TrainConfig, **kwargs) -> Trainer:
    if model.causal:
        raise ValueError("train_noncausal needs a model built with masking_scheme='non_causal'")
    trainer = Trainer(model, family, cfg, **kwargs)
    trainer.run()
    return trainer


def compare_schemes(
    regime: RegimeConfig,
    seq: SequenceModelConfig,
    family,
    cfg: TrainConfig,
    model_seed: int = 0,
) -> dict[str, list[float]]:
    """Train the same configuration under both masking schemes and return
    the paired per-update loss curves."""
    curves = {}
    for scheme in ("causal", "non_causal"):
        s = SequenceModelConfig(**{**seq.to_dict(), "masking_scheme": scheme})
        model = build_amortizer(regime, s, family.x_dim, family.y_dim, family.kind, seed=model_seed)
        trainer = Trainer(model, family, cfg)
        trainer.run()
        curves[scheme] = [h["loss"] for h in trainer.history]
    return curves


# ---------------------------------------------------------------------------
# baselines on the fixed linear predictor


def _linear_loss_and_grad(theta: np.ndarray, x: np.ndarray, y: np.ndarray, kind: str):
    t = ad.Tensor(theta, requires_grad=True)
    from .amortizer import task_loss

    loss = task_loss(kind, fixed_predict(x, t), y)
    (g,) = ad.grad(loss, [t])
    return float(loss.data), g


def adam_at_inference_baseline(
    x_train: np.ndarray,
    y_train: np.ndarray,
    x_valid: np.ndarray,
    y_valid: np.ndarray,
    steps: int = 10,
    lr: float = 0.01,
    kind: str = "regression",
    seed: int = 0,
    theta0: np.ndarray | None = None,
) -> np.ndarray:
    """Plain Adam on the train loss of a fixed linear predictor from a
    standard-normal init. Returns the validation loss before and after each
    step (``steps + 1`` values)."""
    c = y_valid.shape[-1] if kind == "regression" else int(max(y_train.max(), y_valid.max())) + 1
    p = (x_train.shape[-1] + 1) * c
    theta = np.random.default_rng(seed).standard_normal(p) if theta0 is None else np.array(theta0, dtype=np.float64)
    leaf = ad.Tensor(theta, requires_grad=True)
    opt = Adam({"theta": leaf}, lr=lr)
    traj = []
    for i in range(steps + 1):
        with ad.no_grad():
            traj.append(float(per_task_loss(kind, fixed_predict(x_valid, leaf).data[None], y_valid[None])[0]))
        if i == steps:
            break
        _, g = _linear_loss_and_grad(leaf.data, x_train, y_train, kind)
        opt.step({"theta": g})
    return np.array(traj)


def gd_adapt(theta0: np.ndarray, x: np.ndarray, y: np.ndarray, steps: int, lr: float, kind: str) -> np.ndarray:
    theta = np.array(theta0, dtype=ad.get_dtype())
    for _ in range(steps):
        _, g = _linear_loss_and_grad(theta, x, y, kind)
        theta = theta - lr * g
    return theta


@dataclass
class MAMLResult:
    theta0: np.ndarray
    inner_steps: int
    inner_lr: float
    kind: str
    losses: list[float]

    def adapt(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return gd_adapt(self.theta0, x, y, self.inner_steps, self.inner_lr, self.kind)


def maml_baseline(
    family,
    inner_steps: int = 10,
    inner_lr: float = 0.01,
    outer_updates: int = 300,
    meta_batch: int = 8,
    outer_lr: float = 0.01,
    batch_size: int = 32,
    n_queries: int = 32,
    seed: int = 0,
) -> MAMLResult:
    """First-order MAML over a fixed linear predictor: the inner loop runs
    plain gradient descent on one context minibatch and the outer gradient is
    the query-loss gradient at the adapted weights."""
    kind = family.kind
    c = family.y_dim
    p = (family.x_dim + 1) * c
    theta0 = ad.Tensor(np.zeros(p), requires_grad=True)
    opt = Adam({"theta0": theta0}, lr=outer_lr)
    cfg = TrainConfig(meta_batch=meta_batch, max_context=batch_size, n_queries=n_queries, refinement_steps=1, seed=seed)
    losses = []
    for u in range(outer_updates):
        rng = update_rng(seed, u)
        datas = [t.data for t in sample_meta_batch(family, cfg, rng)]
        batches = task_batches(datas, batch_size, 1, rng)
        qx, qy = _queries(datas, n_queries, rng, kind)
        bx, by = batches[0]
        if kind == "regression" and by.ndim == 2:
            by = by[..., None]
        g_total = np.zeros(p)
        loss_total = 0.0
        for i in range(len(datas)):
            th = gd_adapt(theta0.data, bx[i], by[i], inner_steps, inner_lr, kind)
            loss, g = _linear_loss_and_grad(th, qx[i], qy[i], kind)
            g_total += g
            loss_total += loss
        opt.step({"theta0": g_total / len(datas)})
        losses.append(loss_total / len(datas))
    return MAMLResult(theta0.data.copy(), inner_steps, inner_lr, kind, losses)


# ---------------------------------------------------------------------------
# attention-cost accounting


def attention_pair_counts(
    model: Amortizer, batch: int, steps: int, x_dim: int | None = None, seed: int = 0
) -> tuple[int, int]:
    """Attended pairs for ``steps`` refinement passes on minibatches of size
    ``batch`` versus one pass on a single context of ``steps * batch``."""
    rng = np.random.default_rng(seed)
    x_dim = x_dim or model.x_dim
    qx = rng.standard_normal((1, 4, x_dim))

    def fake(n):
        bx = rng.standard_normal((1, n, x_dim))
        by = rng.integers(0, model.y_dim, size=(1, n)) if model.kind == "classification" else rng.standard_normal((1, n, 1))
        return bx, by

    from .amortizer import refine

    with count_attention_pairs() as iterative:
        refine(model, [fake(batch) for _ in range(steps)], qx, keep_states=False)
    with count_attention_pairs() as single:
        refine(model, [fake(steps * batch)], qx, keep_states=False)
    return iterative["pairs"], single["pairs"]


def bench_attention(model: Amortizer, batches: Sequence[int] = (8, 16, 32), steps: Sequence[int] = (2, 4)) -> list[dict]:
    rows = []
    for b in batches:
        for k in steps:
            it, single = attention_pair_counts(model, b, k)
            rows.append({"B": b, "K": k, "iterative": it, "single": single, "ratio": it / single, "bound": 1.2 / k})
    return rows


def default_output_root() -> Path:
    return Path(os.environ.get("AMORT_OUTPUT_ROOT", "."))
