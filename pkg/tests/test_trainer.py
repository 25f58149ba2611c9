import numpy as np
import pytest

from amortlearn import autodiff as ad
from amortlearn.amortizer import RegimeConfig, build_amortizer, fixed_predict
from amortlearn.autodiff import Tensor
from amortlearn.tasks import LinRegFamily
from amortlearn.trainer import (
    EVAL_SEED_OFFSET,
    NumericFailure,
    TrainConfig,
    Trainer,
    _queries,
    adam_at_inference_baseline,
    attention_pair_counts,
    bench_attention,
    compare_schemes,
    gd_adapt,
    greedy_train_step,
    learning_rate_at,
    maml_baseline,
    sample_meta_batch,
    train_causal,
    train_noncausal,
    update_rng,
)
from amortlearn.amortizer import task_batches

FAM = LinRegFamily(d=3, n_train=64, n_valid=32)


def small(regime, tiny_seq, scheme="non_causal", signal="data", **kw):
    return build_amortizer(RegimeConfig(regime, signal, latent_dim=4, **kw), tiny_seq(scheme), 3, 1, "regression", seed=0, zero_head=False)


@pytest.mark.parametrize(
    "kwargs",
    [dict(outer_optimizer="sgd"), dict(learning_rate=0.0), dict(refinement_steps=0), dict(meta_batch=0), dict(fixed_context=99), dict(lr_schedule="step")],
)
def test_train_config_validation(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


def test_cosine_schedule_endpoints():
    cfg = TrainConfig(learning_rate=1.0, total_updates=100, lr_schedule="cosine")
    assert learning_rate_at(cfg, 0) == pytest.approx(1.0)
    assert learning_rate_at(cfg, 100) == pytest.approx(0.1)
    assert learning_rate_at(cfg, 50) == pytest.approx(0.55)
    assert learning_rate_at(TrainConfig(learning_rate=0.3), 77) == 0.3


def test_update_rng_is_pure():
    assert update_rng(3, 7).integers(1 << 30) == update_rng(3, 7).integers(1 << 30)
    assert update_rng(3, 7).integers(1 << 30) != update_rng(3, 8).integers(1 << 30)


def test_meta_batch_avoids_eval_seeds():
    tasks = sample_meta_batch(FAM, TrainConfig(meta_batch=16), np.random.default_rng(0))
    assert all(t.seed < EVAL_SEED_OFFSET for t in tasks)


@pytest.mark.parametrize("regime,signal", [("parametric", "grad_plus_data"), ("explicit", "data"), ("implicit", "data")])
def test_greedy_gradient_is_sum_of_independent_step_gradients(regime, signal, tiny_seq, f64):
    """Oracle: rebuild every step from the same fixed inputs and sum the
    per-step parameter gradients, each weighted 1/K."""
    model = small(regime, tiny_seq, signal=signal)
    model.astype(np.float64)
    cfg = TrainConfig(meta_batch=2, refinement_steps=3, max_context=8, n_queries=4, fixed_context=8, grad_clip=None)
    datas = [FAM.sample(i).data for i in range(2)]
    greedy_train_step(model, datas, cfg, None, np.random.default_rng(5))
    got = {k: p.grad.copy() for k, p in model.parameters().items()}

    rng = np.random.default_rng(5)
    batches = task_batches(datas, 8, 3, rng)
    qx, qy = _queries(datas, 4, rng, "regression")
    params = model.parameters()
    names = list(params)
    expect = {k: np.zeros_like(p.data) for k, p in params.items()}
    with ad.no_grad():
        states = [model.initial(2, qx).state.data]
    for bx, by in batches:
        with ad.no_grad():
            st = Tensor(states[-1])
            nxt = model.step(st, bx, by, qx).state.data
        states.append(nxt)
    terms = [model.loss(model.initial(2, qx).preds, qy)]
    for t, (bx, by) in enumerate(batches):
        terms.append(model.loss(model.step(Tensor(states[t]), bx, by, qx).preds, qy))
    for term in terms:
        for name, g in zip(names, ad.grad(term, [params[n] for n in names])):
            expect[name] += g / 3
    for name in names:
        np.testing.assert_allclose(got[name], expect[name], rtol=1e-9, atol=1e-12, err_msg=name)


def test_final_only_ignores_intermediate_steps(tiny_seq):
    model = small("parametric", tiny_seq)
    cfg = TrainConfig(meta_batch=2, refinement_steps=3, max_context=8, n_queries=4, final_only=True)
    info = greedy_train_step(model, [FAM.sample(i).data for i in range(2)], cfg, None, np.random.default_rng(0))
    assert len(info["step_losses"]) == 3


def test_causal_uses_full_context_noncausal_samples(tiny_seq):
    cfg = TrainConfig(meta_batch=2, refinement_steps=2, max_context=16, n_queries=4)
    datas = [FAM.sample(i).data for i in range(2)]
    causal = greedy_train_step(small("parametric", tiny_seq, "causal"), datas, cfg, None, np.random.default_rng(0))
    assert causal["n_context"] == 16
    sizes = {greedy_train_step(small("parametric", tiny_seq), datas, cfg, None, np.random.default_rng(s))["n_context"] for s in range(20)}
    assert len(sizes) > 3 and max(sizes) <= 16


def test_training_reduces_loss(tiny_seq):
    model = small("parametric", tiny_seq, "causal")
    cfg = TrainConfig(learning_rate=3e-3, meta_batch=4, refinement_steps=3, max_context=16, n_queries=16, total_updates=120)
    tr = train_causal(model, FAM, cfg)
    losses = [h["loss"] for h in tr.history]
    assert np.mean(losses[-20:]) < 0.8 * np.mean(losses[:20])
    with pytest.raises(ValueError):
        train_noncausal(model, FAM, cfg)


def test_metrics_jsonl_byte_identical_and_timings_separate(tmp_path, tiny_seq):
    cfg = TrainConfig(meta_batch=2, refinement_steps=2, max_context=8, n_queries=4, total_updates=5)
    blobs = []
    for run in range(2):
        d = tmp_path / str(run)
        d.mkdir()
        Trainer(small("implicit", tiny_seq), FAM, cfg, metrics_path=d / "m.jsonl", timings_path=d / "t.jsonl").run()
        blobs.append((d / "m.jsonl").read_bytes())
        assert len((d / "t.jsonl").read_text().splitlines()) == 5
    assert blobs[0] == blobs[1]
    assert b"seconds" not in blobs[0]
    assert len(blobs[0].splitlines()) == 5


class NaNFamily:
    x_dim, y_dim, kind = 3, 1, "regression"

    def sample(self, seed):
        t = FAM.sample(seed)
        t.data.x_train[:] = np.nan
        return t


def test_non_finite_updates_are_skipped_then_halt(tiny_seq):
    cfg = TrainConfig(meta_batch=2, refinement_steps=2, max_context=8, n_queries=4, total_updates=50, max_skips=3)
    tr = Trainer(small("parametric", tiny_seq, signal="grad"), NaNFamily(), cfg)
    with pytest.raises(NumericFailure):
        tr.run()
    assert tr.update == 3
    assert all(h.get("skipped") for h in tr.history)


def test_gd_adapt_matches_closed_form(f64):
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal((10, 2)), rng.standard_normal((10, 1))
    theta = gd_adapt(np.zeros(3), x, y, steps=1, lr=0.1, kind="regression")
    xa = np.concatenate([x, np.ones((10, 1))], axis=1)
    np.testing.assert_allclose(theta, 0.1 * 2 * xa.T @ y[:, 0] / 10)


def test_adam_baseline_improves_on_linear_task():
    t = LinRegFamily(d=4).sample(0).data
    traj = adam_at_inference_baseline(t.x_train[:32], t.y_train[:32], t.x_valid, t.y_valid, steps=100, lr=0.1, theta0=np.zeros(5))
    assert traj.shape == (101,)
    assert traj[-1] < 0.2 * traj[0]


def test_maml_learns_an_initialization():
    res = maml_baseline(FAM, inner_steps=2, outer_updates=40, meta_batch=4, batch_size=16, n_queries=8)
    assert len(res.losses) == 40 and res.theta0.shape == (4,)
    t = FAM.sample(EVAL_SEED_OFFSET).data
    assert res.adapt(t.x_train[:16], t.y_train[:16]).shape == (4,)


def test_attention_pairs_non_causal_within_bound(tiny_seq):
    model = small("parametric", tiny_seq)
    for row in bench_attention(model):
        assert row["ratio"] <= row["bound"]
    it, single = attention_pair_counts(model, 8, 2)
    # 1 layer, 9 tokens per pass, 2 passes vs 17 tokens once
    assert (it, single) == (2 * 81, 289)


def test_compare_schemes_returns_paired_curves(tiny_seq):
    cfg = TrainConfig(meta_batch=2, refinement_steps=2, max_context=8, n_queries=4, total_updates=3)
    curves = compare_schemes(RegimeConfig("parametric", "data"), tiny_seq(), FAM, cfg)
    assert set(curves) == {"causal", "non_causal"} and all(len(v) == 3 for v in curves.values())
