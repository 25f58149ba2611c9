"""Config-driven training, evaluation and sampling used by the CLI.

Task families pick the pipeline: ``gmm`` trains a flow-matching implicit
model, ``scm`` trains the leaf classifier, everything else trains an
amortizer with the configured regime.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .amortizer import Amortizer, build_amortizer
from .checkpoint import Checkpoint, load, save
from .config import ConfigError, ExperimentConfig, config_from_dict
from .flow import FlowFamily, build_flow_model, integrate_samples
from .metrics import MetricsRecord, evaluate, order_error, summarize, wasserstein
from .scm_model import LeafAmortizer, make_leaf_trainer, predict_order
from .tasks.gmm import sample_from_mixture
from .trainer import EVAL_SEED_OFFSET, Trainer

CHECKPOINT_NAME = "checkpoint.bin"
METRICS_NAME = "metrics.jsonl"
TIMINGS_NAME = "timings.jsonl"


def pipeline(cfg: ExperimentConfig) -> str:
    return {"gmm": "flow", "scm": "leaf"}.get(cfg.task_name, "amortizer")


def build_model(cfg: ExperimentConfig, seed: int | None = None):
    seed = cfg.seed if seed is None else seed
    fam = cfg.family()
    kind = pipeline(cfg)
    if kind == "flow":
        return build_flow_model(fam.x_dim, cfg.model, cfg.flow, steps_k=cfg.regime.steps_k, seed=seed, implicit_state=cfg.regime.implicit_state)
    if kind == "leaf":
        return LeafAmortizer(cfg.leaf, np.random.default_rng(seed))
    return build_amortizer(cfg.regime, cfg.model, fam.x_dim, fam.y_dim, fam.kind, seed=seed)


def training_family(cfg: ExperimentConfig):
    fam = cfg.family()
    return FlowFamily(fam, cfg.flow) if pipeline(cfg) == "flow" else fam


def make_trainer(cfg: ExperimentConfig, model, out_dir: Path | None = None) -> Trainer:
    paths = {}
    if out_dir is not None:
        paths = {"metrics_path": out_dir / METRICS_NAME, "timings_path": out_dir / TIMINGS_NAME}
    fam = training_family(cfg)
    if pipeline(cfg) == "leaf":
        return make_leaf_trainer(model, fam, cfg.train, **paths)
    return Trainer(model, fam, cfg.train, **paths)


def checkpoint_of(cfg: ExperimentConfig, trainer: Trainer) -> Checkpoint:
    tensors = dict(trainer.model.state_dict())
    tensors.update(trainer.opt.state_arrays())
    header = {
        "config": cfg.to_dict(),
        "update": trainer.update,
        "adam_t": trainer.opt.t,
        "rng": {"kind": "per-update", "seed": cfg.train.seed, "next_update": trainer.update},
        "pipeline": pipeline(cfg),
    }
    return Checkpoint(header, tensors)


def restore(ckpt: Checkpoint, trainer: Trainer | None = None):
    """Load weights (and optimizer state into ``trainer`` if given)."""
    cfg = config_from_dict(ckpt.config)
    model = trainer.model if trainer is not None else build_model(cfg)
    weights = {k: v for k, v in ckpt.tensors.items() if not k.startswith("adam.")}
    model.load_state_dict(weights)
    if trainer is not None:
        trainer.opt.load_state_arrays(ckpt.tensors, int(ckpt.header.get("adam_t", 0)))
        trainer.update = ckpt.update
    return cfg, model


def _truncate_jsonl(path: Path, n_records: int) -> None:
    if not path.exists():
        return
    lines = path.read_text(encoding="utf-8").splitlines(keepends=True)
    if len(lines) > n_records:
        path.write_text("".join(lines[:n_records]), encoding="utf-8")


def run_train(cfg: ExperimentConfig, out_dir: Path, resume: bool = True, max_updates: int | None = None) -> Trainer:
    """Train to ``cfg.train.total_updates`` (or ``max_updates`` more),
    resuming from ``out_dir/checkpoint.bin`` when present."""
    out_dir.mkdir(parents=True, exist_ok=True)
    model = build_model(cfg)
    trainer = make_trainer(cfg, model, out_dir)
    ckpt_path = out_dir / CHECKPOINT_NAME
    if resume and ckpt_path.exists():
        ckpt = load(ckpt_path)
        if ckpt.config != cfg.to_dict():
            raise ConfigError("existing checkpoint was written with a different config")
        restore(ckpt, trainer)
    else:
        for name in (METRICS_NAME, TIMINGS_NAME):
            (out_dir / name).unlink(missing_ok=True)
    _truncate_jsonl(out_dir / METRICS_NAME, trainer.update)
    _truncate_jsonl(out_dir / TIMINGS_NAME, trainer.update)
    trainer.on_checkpoint = lambda tr: save(ckpt_path, checkpoint_of(cfg, tr))
    target = cfg.train.total_updates
    if max_updates is not None:
        target = min(target, trainer.update + max_updates)
    try:
        trainer.run(target - trainer.update)
    finally:
        save(ckpt_path, checkpoint_of(cfg, trainer))
    return trainer


# ---------------------------------------------------------------------------
# evaluation


def eval_batch_size(cfg: ExperimentConfig) -> int:
    return cfg.eval.batch_size or cfg.train.max_context


def run_eval(cfg: ExperimentConfig, model) -> list[MetricsRecord]:
    kind = pipeline(cfg)
    if kind == "flow":
        return eval_flow(cfg, model)
    if kind == "leaf":
        return eval_leaf(cfg, model)
    return evaluate(
        model,
        cfg.family(),
        cfg.ood_family(),
        n_tasks=cfg.eval.n_tasks,
        k_values=cfg.eval.k_values,
        batch_size=eval_batch_size(cfg),
        seed=cfg.seed,
        family_name=cfg.task_name,
    )


def eval_flow(cfg: ExperimentConfig, model, n_tasks: int | None = None) -> list[MetricsRecord]:
    """W1/W2 between generated samples and fresh draws from each held-out
    mixture. Mixture parameters are read only to draw the reference set."""
    fam = cfg.family()
    n_tasks = n_tasks or cfg.eval.n_tasks
    n = cfg.eval.n_samples
    tasks = [fam.sample(EVAL_SEED_OFFSET + i) for i in range(n_tasks)]
    contexts = np.stack([t.data.x_train for t in tasks])
    records = []
    per_k = {}
    for k in sorted(set(cfg.eval.k_values)):
        if k < 1:
            continue
        gen = integrate_samples(model, contexts, n, cfg.flow, k, batch_size=eval_batch_size(cfg), seed=cfg.seed)
        w1, w2 = [], []
        for i, t in enumerate(tasks):
            ref = sample_from_mixture(t.hidden["means"], t.hidden["std"], n, np.random.default_rng([cfg.seed, i, 99]))
            w1.append(wasserstein(gen[i], ref, 1))
            w2.append(wasserstein(gen[i], ref, 2))
        per_k[k] = (w1, w2)
        for metric, vals in (("w1", w1), ("w2", w2)):
            mean, se = summarize(vals)
            records.append(MetricsRecord("gmm", "implicit", "data", k, metric, mean, se, n_tasks, False))
    return records


def eval_leaf(cfg: ExperimentConfig, model: LeafAmortizer) -> list[MetricsRecord]:
    fams = [(cfg.family(), False)]
    if cfg.ood_family() is not None:
        fams.append((cfg.ood_family(), True))
    records = []
    for fam, ood in fams:
        tasks = [fam.sample(EVAL_SEED_OFFSET + i) for i in range(cfg.eval.n_tasks)]
        for k in sorted(set(cfg.eval.k_values)):
            if k < 1:
                continue
            errs = [order_error(predict_order(model, t.data.x_train, k=k, seed=cfg.seed), t.hidden["scm"]) for t in tasks]
            mean, se = summarize(errs)
            records.append(MetricsRecord("scm", "implicit", "data", k, "order_error", mean, se, len(tasks), ood))
    return records


def load_checkpoint_model(path: Path):
    ckpt = load(path)
    return restore(ckpt)


def read_jsonl(path: Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]


__all__ = [
    "Amortizer",
    "build_model",
    "checkpoint_of",
    "load_checkpoint_model",
    "read_jsonl",
    "restore",
    "run_eval",
    "run_train",
]
