"""Acceptance gate. Each test checks one criterion at its stated tolerance and
records a single PASS/FAIL line, collected in the terminal summary.

The trend criteria train desk-scale models from the packaged recipe configs,
so this file dominates the suite's runtime (roughly half an hour on one CPU).
Trained models are shared through session fixtures.
"""

from __future__ import annotations

import itertools
import math
import time

import numpy as np
import pytest

from amortlearn import autodiff as ad
from amortlearn.amortizer import RegimeConfig, build_amortizer, fixed_predict, per_task_loss, refine, task_batches
from amortlearn.config import config_from_dict, load_config
from amortlearn.experiment import build_model, make_trainer, run_train
from amortlearn.flow import integrate_samples
from amortlearn.gradcheck import TOLERANCE, run_gradcheck, run_meta_gradcheck
from amortlearn.metrics import median_by_k, order_error, random_order_error, wasserstein
from amortlearn.probes import mask_soundness, prefix_equivalence, stop_gradient_probe
from amortlearn.recipes import RECIPES
from amortlearn.scm_model import predict_order
from amortlearn.sequence_model import SequenceModelConfig
from amortlearn.tasks.gmm import sample_from_mixture
from amortlearn.trainer import EVAL_SEED_OFFSET, bench_attention, gd_adapt, adam_at_inference_baseline, maml_baseline

N_EVAL = 20


def recipe_config(name: str, **overrides):
    raw = load_config(RECIPES[name].config_path).to_dict()
    for section, values in overrides.items():
        raw[section] = {**raw[section], **values}
    return config_from_dict(raw)


def train(cfg):
    model = build_model(cfg)
    make_trainer(cfg, model).run()
    return model


def eval_tasks(cfg, n=N_EVAL):
    fam = cfg.family()
    return [fam.sample(EVAL_SEED_OFFSET + i) for i in range(n)]


def fmt(d: dict) -> str:
    return " ".join(f"k{k}={v:.3f}" for k, v in sorted(d.items()))


# ---------------------------------------------------------------------------
# trained models


@pytest.fixture(scope="session")
def parametric_data():
    cfg = recipe_config("parametric-linreg")
    return cfg, train(cfg)


@pytest.fixture(scope="session")
def parametric_grad():
    cfg = recipe_config("parametric-linreg", regime={"signal": "grad"})
    return cfg, train(cfg)


@pytest.fixture(scope="session")
def implicit_linreg():
    cfg = recipe_config("implicit-linreg")
    return cfg, train(cfg)


# ---------------------------------------------------------------------------
# 1-5: correctness


def test_criterion_01_gradcheck(acceptance):
    t0 = time.perf_counter()
    ops_ok, ops = run_gradcheck()
    meta = {}
    meta_ok = True
    for scheme in ("causal", "non_causal"):
        ok, rep = run_meta_gradcheck(d_model=32, masking_scheme=scheme)
        meta_ok &= ok
        meta.update({f"{r}/{scheme}": e for r, e in rep.items()})
    worst_op = max(ops, key=ops.get)
    worst_meta = max(meta, key=meta.get)
    acceptance(
        1,
        "gradient correctness",
        ops_ok and meta_ok and max(meta.values()) < TOLERANCE,
        f"{len(ops)} ops, worst {worst_op}={ops[worst_op]:.1e}; meta-loss worst {worst_meta}={meta[worst_meta]:.1e}; {time.perf_counter() - t0:.0f}s",
    )


def test_criterion_02_stop_gradient(acceptance):
    # a grad-only step sees the batch only through the constant gradient
    # token, so it has no differentiable batch edge to probe
    cases = [
        ("parametric", "data"),
        ("parametric", "grad_plus_data"),
        ("explicit", "data"),
        ("explicit", "grad_plus_data"),
        ("implicit", "data"),
    ]
    worst_state, weakest_batch = 0.0, math.inf
    for (regime, signal), scheme in itertools.product(cases, ("causal", "non_causal")):
        g_state, g_batch = stop_gradient_probe(regime, signal=signal, scheme=scheme)
        worst_state = max(worst_state, g_state)
        weakest_batch = min(weakest_batch, g_batch)
    acceptance(
        2,
        "stop-gradient",
        worst_state == 0.0 and weakest_batch > 0.0,
        f"max |grad via state|={worst_state}, min max|grad via batch|={weakest_batch:.2e}",
    )


def test_criterion_03_mask_soundness(acceptance):
    counts = mask_soundness(n_cases=100, seed=0)
    acceptance(3, "mask soundness", all(v == 100 for v in counts.values()), ", ".join(f"{k} {v}/100" for k, v in counts.items()))


def test_criterion_04_prefix_parallel(acceptance):
    seq = SequenceModelConfig(d_model=32, d_ffn=64, n_heads=4, n_layers=2, max_context=32, masking_scheme="causal")
    worst = {}
    for regime in ("parametric", "explicit", "implicit"):
        model = build_amortizer(RegimeConfig(regime, "data", latent_dim=8), seq, 3, 1, "regression", seed=0, zero_head=False)
        diffs = prefix_equivalence(model, n=16)
        assert len(diffs) == 16
        worst[regime] = float(diffs.max())
    acceptance(4, "prefix-parallel equivalence", max(worst.values()) < 1e-5, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))


def brute_force_wasserstein(a, b, p):
    n = len(a)
    best = min(sum(np.sum(np.abs(a[i] - b[j]) ** p) for i, j in enumerate(perm)) for perm in itertools.permutations(range(n)))
    return (best / n) ** (1.0 / p)


def test_criterion_05_wasserstein_oracle(acceptance):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for i in range(50):
        n = 1 + i % 7
        a, b = rng.standard_normal((n, 2)), rng.standard_normal((n, 2))
        for p in (1, 2):
            ref = brute_force_wasserstein(a, b, p)
            worst = max(worst, abs(wasserstein(a, b, p) - ref) / max(ref, 1e-300))
    violations = 0
    for _ in range(200):
        a, b, c = (rng.standard_normal((6, 2)) * 3 for _ in range(3))
        for p in (1, 2):
            ab, ba, bc, ac = wasserstein(a, b, p), wasserstein(b, a, p), wasserstein(b, c, p), wasserstein(a, c, p)
            ok = wasserstein(a, a, p) == 0.0 and ab > 0 and math.isclose(ab, ba, rel_tol=1e-12) and ac <= ab + bc + 1e-12
            violations += not ok
    acceptance(
        5,
        "Wasserstein oracle",
        worst < 1e-12 and violations == 0,
        f"max rel gap to brute force over 50 instances (N<=7, p=1,2) {worst:.1e}; axiom violations {violations}/400",
    )


# ---------------------------------------------------------------------------
# 6-10: trends


def test_criterion_06_parametric_trend(acceptance, parametric_data, parametric_grad):
    lines, ok = [], True
    for label, (cfg, model) in (("data", parametric_data), ("grad", parametric_grad)):
        med = median_by_k(model, eval_tasks(cfg), [1, 5, 10], batch_size=32)
        ok &= med[10] < med[5] < med[1]
        if label == "data":
            ok &= med[10] < 0.5 * med[1]
        lines.append(f"{label}: {fmt(med)}")
    acceptance(6, "parametric refinement trend", ok, "; ".join(lines))


PROJECTION_UPDATES = 1000


def projection_error(variant: str) -> float:
    """Median k=10 classification error of an implicit model with the given
    state variant, trained on projection tasks with the implicit recipe.
    Noisy prototypes keep the error well away from zero so the variants
    can differ."""
    raw = load_config(RECIPES["implicit-linreg"].config_path).to_dict()
    raw["task"] = {"name": "projection", "noise": 1.5}
    raw["regime"]["implicit_state"] = variant
    raw["train"]["total_updates"] = PROJECTION_UPDATES
    cfg = config_from_dict(raw)
    model = train(cfg)
    return median_by_k(model, eval_tasks(cfg), [10], batch_size=32, metric="error")[10]


def test_criterion_07_implicit_trend(acceptance, implicit_linreg):
    cfg, model = implicit_linreg
    med = median_by_k(model, eval_tasks(cfg), [1, 5, 10], batch_size=32)
    monotone = med[1] > med[5] > med[10]
    errors = {}
    for variant in ("logits", "softmax"):
        errors[variant] = projection_error(variant)
    acceptance(
        7,
        "implicit refinement trend",
        monotone and errors["logits"] <= errors["softmax"],
        f"linreg {fmt(med)}; projection error at k=10 logits={errors['logits']:.1f}% softmax={errors['softmax']:.1f}%",
    )


def test_criterion_08_baseline_ordering(acceptance, parametric_data):
    cfg, model = parametric_data
    fam = cfg.family()
    tasks = eval_tasks(cfg)
    datas = [t.data for t in tasks]
    (bx, by), = task_batches(datas, 32, 1, np.random.default_rng(0))
    qx = np.stack([d.x_valid for d in datas])
    qy = np.stack([d.y_valid for d in datas])
    _, losses, _ = refine(model, [(bx, by)], qx, qy, keep_states=False)
    amortized = float(np.median(losses[1]))

    maml = maml_baseline(fam, inner_steps=10, inner_lr=0.01, outer_updates=300, seed=0)
    maml_losses, adam_losses = [], []
    for i in range(len(datas)):
        theta = maml.adapt(bx[i], by[i])
        with ad.no_grad():
            preds = fixed_predict(qx[i][None], ad.Tensor(theta[None])).data
        maml_losses.append(per_task_loss("regression", preds, qy[i][None])[0])
        adam_losses.append(adam_at_inference_baseline(bx[i], by[i], qx[i], qy[i], steps=10, lr=0.01, seed=i)[-1])
    maml_med, adam_med = float(np.median(maml_losses)), float(np.median(adam_losses))

    def per_task_time(fn):
        times = []
        for i in range(len(datas)):
            fn(i)
            t0 = time.perf_counter()
            for _ in range(5):
                fn(i)
            times.append((time.perf_counter() - t0) / 5)
        return float(np.median(times))

    def amortize(i):
        with ad.no_grad():
            model.step(model.initial(1, qx[i : i + 1]).state, bx[i : i + 1], by[i : i + 1], qx[i : i + 1])

    def adapt(i):
        gd_adapt(maml.theta0, bx[i], by[i], 10, 0.01, "regression")

    t_amort, t_adapt = per_task_time(amortize), per_task_time(adapt)
    acceptance(
        8,
        "baseline ordering",
        amortized < maml_med < adam_med and t_amort < t_adapt,
        f"loss amortized(k=1)={amortized:.2f} < MAML(10)={maml_med:.2f} < Adam(10)={adam_med:.2f}; "
        f"wall time per task {t_amort * 1e3:.2f}ms vs {t_adapt * 1e3:.2f}ms",
    )


def test_criterion_09_flow_trend(acceptance):
    cfg = recipe_config("flow-gmm2d")
    model = train(cfg)
    fam = cfg.family()
    tasks = [fam.sample(EVAL_SEED_OFFSET + i) for i in range(10)]
    ctx = np.stack([t.data.x_train for t in tasks])
    n = 128
    med = {}
    for k in (1, 10):
        gen = integrate_samples(model, ctx, n, cfg.flow, k, batch_size=cfg.eval.batch_size, seed=0)
        w2 = [
            wasserstein(gen[i], sample_from_mixture(t.hidden["means"], t.hidden["std"], n, np.random.default_rng([0, i, 99])), 2)
            for i, t in enumerate(tasks)
        ]
        med[k] = float(np.median(w2))
    acceptance(9, "generative trend", med[10] < med[1], f"median W2 over 10 mixtures, N={n}: {fmt(med)}")


def test_criterion_10_scm_order(acceptance):
    cfg = recipe_config("scm-order")
    model = train(cfg)
    tasks = eval_tasks(cfg)
    errs = [order_error(predict_order(model, t.data.x_train, seed=0), t.hidden["scm"]) for t in tasks]
    baseline = float(np.mean([random_order_error(t.hidden["scm"].adjacency, n_draws=2000, seed=i) for i, t in enumerate(tasks)]))
    err = float(np.mean(errs))
    acceptance(
        10,
        "SCM ordering",
        err <= 0.8 * baseline,
        f"order error {err:.3f} vs simulated random {baseline:.3f} (bound {0.8 * baseline:.3f})",
    )


# ---------------------------------------------------------------------------
# 11-12: accounting and determinism


def test_criterion_11_attention_cost(acceptance):
    cfg = config_from_dict(
        {
            "version": 1,
            "task": {"name": "linreg", "d": 16},
            "model": {"d_model": 32, "d_ffn": 64, "n_layers": 1, "masking_scheme": "non_causal"},
            "regime": {"regime": "parametric", "signal": "data"},
        }
    )
    rows = bench_attention(build_model(cfg), batches=(8, 16, 32), steps=(2, 4))
    ok = all(r["ratio"] <= r["bound"] for r in rows)
    acceptance(11, "attention cost", ok, ", ".join(f"B{r['B']}K{r['K']} {r['ratio']:.3f}/{r['bound']:.3f}" for r in rows))


def test_criterion_12_determinism(acceptance, tmp_path):
    cfg = load_config(RECIPES["parametric-linreg"].config_path.parent / "smoke.yaml")
    blobs = []
    for name in ("a", "b"):
        run_train(cfg, tmp_path / name)
        blobs.append((tmp_path / name / "metrics.jsonl").read_bytes())
    n_lines = blobs[0].count(b"\n")
    acceptance(12, "determinism", blobs[0] == blobs[1] and n_lines == cfg.train.total_updates, f"{n_lines} records, identical={blobs[0] == blobs[1]}")
