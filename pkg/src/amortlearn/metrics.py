"""Evaluation metrics and the ID/OoD evaluation harness."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .amortizer import Amortizer, per_task_error, per_task_loss, refine, task_batches

CSV_COLUMNS = ["family", "regime", "signal", "steps", "metric", "mean", "se", "n_tasks", "ood"]


def mse(predictions, targets) -> float:
    p, t = np.asarray(predictions, dtype=np.float64), np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    return float(np.mean((p - t) ** 2))


def classification_error(predictions, labels) -> float:
    """Percent error. ``predictions`` are scores (argmax, lowest index on
    ties) or already-decided integer labels."""
    p, y = np.asarray(predictions), np.asarray(labels)
    if y.size == 0:
        raise ValueError("empty input")
    if p.ndim == y.ndim + 1:
        p = np.argmax(p, axis=-1)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch {p.shape} vs {y.shape}")
    return float(100.0 * np.mean(p != y))


def wasserstein_cost_matrix(a: np.ndarray, b: np.ndarray, p: int) -> np.ndarray:
    diff = np.abs(a[:, None, :] - b[None, :, :])
    return (diff**p).sum(axis=-1)


def wasserstein(samples_a, samples_b, p: int = 2) -> float:
    """Exact permutation Wasserstein distance between equal-size point sets.

    Cost entries are ``||x_i - y_j||_p^p`` and the result is the optimal mean
    cost to the power ``1/p``.
    """
    a = np.atleast_2d(np.asarray(samples_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(samples_b, dtype=np.float64))
    if p not in (1, 2):
        raise ValueError("p must be 1 or 2")
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"need equal sample counts, got {a.shape[0]} and {b.shape[0]}")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch {a.shape[1]} vs {b.shape[1]}")
    if a.shape[0] == 0:
        return 0.0
    cost = wasserstein_cost_matrix(a, b, p)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean() ** (1.0 / p))


def order_error(order, scm) -> float:
    """Fraction of edges ``i -> j`` placed with ``j`` before ``i``."""
    adj = scm.adjacency if hasattr(scm, "adjacency") else np.asarray(scm)
    d = adj.shape[0]
    order = np.asarray(order, dtype=int)
    if order.shape != (d,) or not np.array_equal(np.sort(order), np.arange(d)):
        raise ValueError(f"order must be a permutation of {d} nodes")
    pos = np.empty(d, dtype=int)
    pos[order] = np.arange(d)
    src, dst = np.nonzero(adj)
    if src.size == 0:
        return 0.0
    return float(np.mean(pos[src] > pos[dst]))


def random_order_error(adjacency: np.ndarray, n_draws: int = 2000, seed: int = 0) -> float:
    """Expected order error of a uniformly random permutation (simulated)."""
    rng = np.random.default_rng(seed)
    d = adjacency.shape[0]
    return float(np.mean([order_error(rng.permutation(d), adjacency) for _ in range(n_draws)]))


# ---------------------------------------------------------------------------
# records


@dataclass
class MetricsRecord:
    family: str
    regime: str
    signal: str
    steps: int
    metric: str
    mean: float
    se: float
    n_tasks: int
    ood: bool = False

    @property
    def se_defined(self) -> bool:
        return self.n_tasks >= 2


def summarize(values: Sequence[float]) -> tuple[float, float]:
    """Mean and standard error over task-level values (SE 0 for one task)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("no values")
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size >= 2 else 0.0
    return float(v.mean()), se


def records_to_csv(records: Iterable[MetricsRecord]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in records:
        row = asdict(r)
        row["mean"] = repr(float(r.mean))
        row["se"] = repr(float(r.se))
        row["ood"] = "true" if r.ood else "false"
        writer.writerow(row)
    return buf.getvalue()


def records_from_csv(text: str) -> list[MetricsRecord]:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != CSV_COLUMNS:
        raise ValueError(f"unexpected columns {reader.fieldnames}")
    out = []
    for row in reader:
        out.append(
            MetricsRecord(
                family=row["family"],
                regime=row["regime"],
                signal=row["signal"],
                steps=int(row["steps"]),
                metric=row["metric"],
                mean=float(row["mean"]),
                se=float(row["se"]),
                n_tasks=int(row["n_tasks"]),
                ood=row["ood"] == "true",
            )
        )
    return out


def write_csv(path: str | Path, records: Iterable[MetricsRecord]) -> None:
    from .io_utils import atomic_write_text

    atomic_write_text(path, records_to_csv(records))


# ---------------------------------------------------------------------------
# evaluation harness


def evaluate_tasks(
    model: Amortizer,
    tasks,
    k_values: Sequence[int],
    batch_size: int,
    seed: int = 0,
) -> dict[str, np.ndarray]:
    """Per-task metrics at each k, shape ``(len(k_values), n_tasks)``.

    Only ``task.data`` reaches the model; hidden task parameters are never
    read here.
    """
    k_values = sorted(set(int(k) for k in k_values))
    if k_values[0] < 0:
        raise ValueError("k must be >= 0")
    k_max = max(k_values)
    datas = [t.data for t in tasks]
    rng = np.random.default_rng(seed)
    batches = task_batches(datas, batch_size, max(k_max, 1), rng)[:k_max]
    qx = np.stack([d.x_valid for d in datas])
    qy = np.stack([d.y_valid for d in datas])
    _, losses, preds = refine(model, batches, qx, qy, keep_states=False)
    out = {"loss": np.stack([losses[k] for k in k_values])}
    if model.kind == "classification":
        out["error"] = np.stack([per_task_error(preds[k], qy) for k in k_values])
    return out


def evaluate(
    model: Amortizer,
    family_id,
    family_ood=None,
    n_tasks: int = 20,
    k_values: Sequence[int] = (1, 5, 10),
    batch_size: int = 32,
    seed: int = 0,
    family_name: str | None = None,
) -> list[MetricsRecord]:
    """Fresh tasks from the in-distribution family (and optionally an OoD
    family), reported as mean and SE over tasks for every k."""
    from .trainer import EVAL_SEED_OFFSET

    records = []
    regime = model.regime
    for fam, ood in ((family_id, False), (family_ood, True)):
        if fam is None:
            continue
        if (fam.x_dim, fam.y_dim, fam.kind) != (model.x_dim, model.y_dim, model.kind):
            raise ValueError("task family is incompatible with the model's input/output shapes")
        tasks = [fam.sample(EVAL_SEED_OFFSET + seed * 100_003 + i) for i in range(n_tasks)]
        per = evaluate_tasks(model, tasks, k_values, batch_size, seed=seed)
        name = family_name or fam.to_dict()["name"]
        for metric, table in per.items():
            for k, row in zip(sorted(set(k_values)), table):
                mean, se = summarize(row)
                records.append(MetricsRecord(name, regime.regime, regime.signal, int(k), metric, mean, se, n_tasks, ood))
    return records


def median_by_k(model: Amortizer, tasks, k_values: Sequence[int], batch_size: int, seed: int = 0, metric: str = "loss") -> dict[int, float]:
    per = evaluate_tasks(model, tasks, k_values, batch_size, seed)
    return {k: float(np.median(row)) for k, row in zip(sorted(set(k_values)), per[metric])}


__all__ = [
    "CSV_COLUMNS",
    "MetricsRecord",
    "classification_error",
    "evaluate",
    "evaluate_tasks",
    "median_by_k",
    "mse",
    "order_error",
    "random_order_error",
    "records_from_csv",
    "records_to_csv",
    "summarize",
    "wasserstein",
    "write_csv",
    "per_task_loss",
]
