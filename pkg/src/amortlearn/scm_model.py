"""Leaf classifier for SCM data and its greedy training loop.

The model embeds every (sample, node) cell and alternates attention across
nodes (within a sample) and across samples (within a node). A per-node leaf
logit is the recurrent state: each refinement step reads a fresh minibatch of
samples plus the previous logits and emits new logits. Nothing in the model
depends on node identity, so it is equivariant to node permutations.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import LayerNorm, Linear, Module, parameter
from .optim import Adam, clip_global_norm
from .sequence_model import Block, SequenceModelConfig, full_mask
from .tasks.scm import infer_topological_order, leaves


@dataclass
class LeafModelConfig:
    d_model: int = 32
    d_ffn: int = 64
    n_heads: int = 4
    n_layers: int = 2
    steps_k: int = 3
    samples_per_step: int = 50

    def __post_init__(self):
        if self.steps_k < 1:
            raise ValueError("steps_k must be >= 1")
        if self.samples_per_step < 2:
            raise ValueError("samples_per_step must be >= 2")

    def to_dict(self) -> dict:
        return asdict(self)


def normalize(data: np.ndarray) -> np.ndarray:
    """Center every node and divide by one global scale per task. A single
    scale keeps relative node variances intact."""
    data = np.asarray(data, dtype=np.float64)
    centered = data - data.mean(axis=-2, keepdims=True)
    scale = centered.reshape(*centered.shape[:-2], -1).std(axis=-1)[..., None, None]
    return centered / np.maximum(scale, 1e-8)


class LeafAmortizer(Module):
    def __init__(self, cfg: LeafModelConfig, rng: np.random.Generator):
        self._cfg = cfg
        seq = SequenceModelConfig(d_model=cfg.d_model, d_ffn=cfg.d_ffn, n_heads=cfg.n_heads, n_layers=1, max_context=10_000)
        self.value_enc = Linear(2, cfg.d_model, rng)
        self.state_enc = Linear(1, cfg.d_model, rng)
        self.node_blocks = [Block(seq, rng) for _ in range(cfg.n_layers)]
        self.sample_blocks = [Block(seq, rng) for _ in range(cfg.n_layers)]
        self.ln = LayerNorm(cfg.d_model)
        self.head = Linear(cfg.d_model, 1, rng, init="zeros")
        self.s0 = parameter(np.zeros(1))

    @property
    def cfg(self) -> LeafModelConfig:
        return self._cfg

    def initial(self, n_tasks: int, d: int) -> Tensor:
        return self.s0 + np.zeros((n_tasks, d), dtype=ad.get_dtype())

    def step(self, state: Tensor, x: np.ndarray) -> Tensor:
        """``x`` is ``(B, n, d)`` normalized data; returns ``(B, d)`` logits."""
        x = np.asarray(x, dtype=ad.get_dtype())
        b, n, d = x.shape
        feats = np.stack([x, x * x], axis=-1)
        h = self.value_enc(feats)
        s = self.state_enc(ad.reshape(state, (b, 1, d, 1)))
        h = h + s
        dm = self._cfg.d_model
        node_mask, sample_mask = full_mask(d), full_mask(n)
        for nb, sb in zip(self.node_blocks, self.sample_blocks):
            h = ad.reshape(nb(ad.reshape(h, (b * n, d, dm)), node_mask), (b, n, d, dm))
            ht = ad.transpose(h, (0, 2, 1, 3))
            ht = ad.reshape(sb(ad.reshape(ht, (b * d, n, dm)), sample_mask), (b, d, n, dm))
            h = ad.transpose(ht, (0, 2, 1, 3))
        pooled = ad.tensor_mean(self.ln(h), axis=1)
        return ad.reshape(self.head(pooled), (b, d))

    def leaf_logits(self, data: np.ndarray, k: int | None = None, seed: int = 0) -> np.ndarray:
        """Refined leaf logits for one ``(n, d)`` dataset."""
        k = self._cfg.steps_k if k is None else k
        rng = np.random.default_rng(seed)
        x = normalize(data)
        n = len(x)
        m = min(self._cfg.samples_per_step, n)
        with ad.no_grad():
            state = self.initial(1, x.shape[1])
            for _ in range(k):
                idx = rng.choice(n, size=m, replace=False)
                state = ad.stop_gradient(self.step(state, x[None, idx]))
        return state.data[0].astype(np.float64)


def leaf_targets(adjacency: np.ndarray, active: np.ndarray) -> np.ndarray:
    """Uniform distribution over the true leaves of the active sub-graph."""
    lv = set(leaves(adjacency, active).tolist())
    t = np.array([1.0 if a in lv else 0.0 for a in active])
    return t / t.sum()


def sample_active_subgraph(adjacency: np.ndarray, n_remove: int, rng: np.random.Generator) -> np.ndarray:
    """Remove ``n_remove`` nodes by repeatedly deleting a random true leaf,
    which mirrors what recursive leaf removal sees at inference."""
    active = np.arange(adjacency.shape[0])
    for _ in range(n_remove):
        lv = leaves(adjacency, active)
        active = active[active != rng.choice(lv)]
    return active


def leaf_train_step(model: LeafAmortizer, family, meta_batch: int, opt: Adam | None, rng: np.random.Generator, grad_clip: float | None = 1.0) -> dict:
    """Greedy update: step ``t`` sees the stop-gradient of the logits from
    step ``t - 1``; the ``K`` cross-entropy losses are averaged."""
    from .trainer import EVAL_SEED_OFFSET

    params = model.parameters()
    cfg = model.cfg
    k = cfg.steps_k
    tasks = [family.sample(int(s)) for s in rng.integers(0, EVAL_SEED_OFFSET, size=meta_batch)]
    d = tasks[0].data.x_train.shape[1]
    n_remove = int(rng.integers(0, d - 1))
    xs, targets = [], []
    for t in tasks:
        adj = t.hidden["scm"].adjacency
        active = sample_active_subgraph(adj, n_remove, rng)
        xs.append(normalize(t.data.x_train[:, active]))
        targets.append(leaf_targets(adj, active))
    xs, targets = np.stack(xs), np.stack(targets)
    for p in params.values():
        p.grad = None
    state = ad.stop_gradient(model.initial(len(tasks), xs.shape[2]))
    step_losses = []
    for _ in range(k):
        idx = rng.choice(xs.shape[1], size=min(cfg.samples_per_step, xs.shape[1]), replace=False)
        logits = model.step(state, xs[:, idx])
        loss = ad.cross_entropy(logits, targets)
        ad.backward(loss * (1.0 / k), accumulate=True)
        step_losses.append(float(loss.data))
        state = ad.stop_gradient(logits)
    grads = {name: (p.grad if p.grad is not None else np.zeros_like(p.data)) for name, p in params.items()}
    norm = clip_global_norm(grads, grad_clip)
    if opt is not None:
        opt.step(grads)
    return {"loss": float(np.mean(step_losses)), "step_losses": step_losses, "n_active": int(d - n_remove), "grad_norm": norm}


def make_leaf_trainer(model: LeafAmortizer, family, train_cfg, **kwargs):
    """A :class:`~amortlearn.trainer.Trainer` whose updates train the leaf
    classifier; ``train_cfg`` supplies learning rate, meta batch, seed and
    clipping."""
    from .trainer import Trainer

    class LeafTrainer(Trainer):
        def one_update(self, rng):
            return leaf_train_step(self.model, self.family, self.cfg.meta_batch, self.opt, rng, self.cfg.grad_clip)

    return LeafTrainer(model, family, train_cfg, **kwargs)


def train_leaf_model(model: LeafAmortizer, family, updates: int = 1000, meta_batch: int = 8, lr: float = 1e-3, seed: int = 0) -> list[float]:
    from .trainer import TrainConfig

    cfg = TrainConfig(learning_rate=lr, meta_batch=meta_batch, total_updates=updates, seed=seed)
    trainer = make_leaf_trainer(model, family, cfg)
    trainer.run()
    return [h["loss"] for h in trainer.history]


def predict_order(model: LeafAmortizer, data: np.ndarray, k: int | None = None, seed: int = 0) -> np.ndarray:
    """Recursive leaf removal driven by the model's refined logits."""

    def scorer(sub: np.ndarray, active: np.ndarray) -> np.ndarray:
        return model.leaf_logits(sub, k=k, seed=seed)

    return infer_topological_order(scorer, np.asarray(data))
