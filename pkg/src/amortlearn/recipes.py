"""Reproduction recipes: a config plus a qualitative trend check.

Each recipe trains at desk scale, evaluates, and asserts a trend (more
refinement steps help) rather than absolute numbers.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from .config import load_config
from .experiment import run_eval, run_train
from .metrics import MetricsRecord, write_csv

CONFIG_DIR = Path(__file__).resolve().parent / "configs"


def _by_k(records: list[MetricsRecord], metric: str, ood: bool = False) -> dict[int, float]:
    return {r.steps: r.mean for r in records if r.metric == metric and r.ood == ood}


def _halves(records):
    v = _by_k(records, "loss")
    return v[10] < v[5] < v[1] and v[10] < 0.5 * v[1], f"loss k1={v[1]:.3f} k5={v[5]:.3f} k10={v[10]:.3f}"


def _improves(records):
    v = _by_k(records, "loss")
    return v[10] < v[1], f"loss k1={v[1]:.3f} k10={v[10]:.3f}"


def _monotone(records):
    v = _by_k(records, "loss")
    return v[1] > v[5] > v[10], f"loss k1={v[1]:.3f} k5={v[5]:.3f} k10={v[10]:.3f}"


def _beats_random(records):
    # a uniformly random order reverses each edge with probability 1/2
    v = _by_k(records, "order_error")
    k = max(v)
    return v[k] <= 0.8 * 0.5, f"order error k={k}: {v[k]:.3f} (random 0.5)"


def _w2_improves(records):
    v = _by_k(records, "w2")
    return v[10] < v[1], f"W2 k1={v[1]:.3f} k10={v[10]:.3f}"


@dataclass(frozen=True)
class ReproRecipe:
    name: str
    experiment: str
    config: str
    expected: str
    runtime: str
    check: Callable[[list[MetricsRecord]], tuple[bool, str]]

    @property
    def config_path(self) -> Path:
        return CONFIG_DIR / self.config


RECIPES: dict[str, ReproRecipe] = {
    r.name: r
    for r in [
        ReproRecipe(
            "parametric-linreg",
            "parametric regime, linear regression, data signal",
            "parametric-linreg.yaml",
            "loss(10) < loss(5) < loss(1) and loss(10) < loss(1) / 2",
            "~4 min",
            _halves,
        ),
        ReproRecipe(
            "explicit-linreg",
            "explicit regime, linear regression, grad+data signal",
            "explicit-linreg.yaml",
            "loss(10) < loss(1)",
            "~12 min",
            _improves,
        ),
        ReproRecipe(
            "implicit-linreg",
            "implicit regime, linear regression",
            "implicit-linreg.yaml",
            "loss strictly decreasing over k = 1, 5, 10",
            "~7 min",
            _monotone,
        ),
        ReproRecipe(
            "scm-order",
            "implicit leaf classifier, topological order of 5-node linear SCMs",
            "scm-order.yaml",
            "order error at least 20% below the random-order baseline",
            "~3 min",
            _beats_random,
        ),
        ReproRecipe(
            "flow-gmm2d",
            "implicit flow matching, 2-d Gaussian mixtures",
            "flow-gmm2d.yaml",
            "W2(k=10) < W2(k=1)",
            "~5 min",
            _w2_improves,
        ),
    ]
}


@dataclass
class RecipeResult:
    name: str
    passed: bool
    detail: str
    records: list[MetricsRecord]


def run_recipe(name: str, out_dir: str | Path, max_updates: int | None = None) -> RecipeResult:
    """Train (resuming if possible), evaluate, write ``eval.csv`` and apply
    the recipe's trend check."""
    if name not in RECIPES:
        raise KeyError(f"unknown recipe {name!r}; known: {sorted(RECIPES)}")
    recipe = RECIPES[name]
    cfg = load_config(recipe.config_path)
    out_dir = Path(out_dir)
    trainer = run_train(cfg, out_dir, max_updates=max_updates)
    records = run_eval(cfg, trainer.model)
    write_csv(out_dir / "eval.csv", records)
    passed, detail = recipe.check(records)
    return RecipeResult(name, passed, detail, records)
