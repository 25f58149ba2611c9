import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amortlearn.flow import (
    FlowConfig,
    FlowFamily,
    build_flow_model,
    cfm_training_pair,
    context_inputs,
    integrate_samples,
    query_inputs,
    read_points_csv,
    samples_to_csv,
    time_features,
)
from amortlearn.tasks import GMMFamily


def test_flow_config_validation():
    FlowConfig()
    for bad in (dict(interpolant="vp"), dict(n_integration_steps=0), dict(sigma_min=-1.0), dict(n_time_features=3)):
        with pytest.raises(ValueError):
            FlowConfig(**bad)


def test_time_features_values():
    f = time_features(np.array([0.0, 0.5]), 4)
    np.testing.assert_allclose(f[0], [0, 0, 1, 1], atol=1e-15)
    np.testing.assert_allclose(f[1], [1, 0, 0, -1], atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 1), st.integers(0, 1000), st.floats(0, 0.2))
def test_cfm_pair_is_on_the_linear_path(t, seed, sigma_min):
    rng = np.random.default_rng(seed)
    x1 = rng.standard_normal((5, 2))
    tt, x_t, u = cfm_training_pair(x1, np.random.default_rng(seed + 1), t=t, sigma_min=sigma_min)
    x0 = np.random.default_rng(seed + 1).standard_normal((5, 2))
    s = 1 - sigma_min
    np.testing.assert_allclose(x_t, (1 - s * t) * x0 + t * x1)
    np.testing.assert_allclose(u, x1 - s * x0)
    # the target is the time derivative of the path
    eps = 1e-6
    _, x_next, _ = cfm_training_pair(x1, np.random.default_rng(seed + 1), t=t + eps, sigma_min=sigma_min)
    np.testing.assert_allclose((x_next - x_t) / eps, u, rtol=1e-4, atol=1e-4)


def test_cfm_endpoints():
    x1 = np.ones((3, 2))
    _, x_t, _ = cfm_training_pair(x1, np.random.default_rng(0), t=1.0)
    np.testing.assert_allclose(x_t, x1)


def test_token_inputs():
    pts = np.zeros((4, 2))
    cx, cy = context_inputs(pts, 8)
    assert cx.shape == (4, 10) and not cy.any()
    np.testing.assert_allclose(cx[0, 2:], time_features(1.0, 8))
    assert query_inputs(pts, np.zeros(4), 8).shape == (4, 10)


def test_flow_family_dimensions():
    fam = FlowFamily(GMMFamily(dim=2, n_train=32, n_valid=16), FlowConfig())
    t = fam.sample(0)
    assert (fam.x_dim, fam.y_dim) == (10, 2)
    assert t.data.x_train.shape == (32, 10) and t.data.y_valid.shape == (16, 2)


@pytest.fixture
def flow_model(tiny_seq):
    return build_flow_model(2, tiny_seq("non_causal"), FlowConfig(n_integration_steps=5), steps_k=2, seed=0)


def test_integrate_shapes(flow_model):
    ctx = np.random.default_rng(0).standard_normal((20, 2))
    cfg = FlowConfig(n_integration_steps=5)
    assert integrate_samples(flow_model, ctx, 7, cfg, k=2, batch_size=8).shape == (7, 2)
    assert integrate_samples(flow_model, np.stack([ctx, ctx]), 3, cfg, k=1, batch_size=8).shape == (2, 3, 2)
    assert integrate_samples(flow_model, ctx, 0, cfg, k=1).shape == (0, 2)


def test_integrate_is_deterministic_and_checks_dims(flow_model):
    ctx = np.random.default_rng(0).standard_normal((20, 2))
    cfg = FlowConfig(n_integration_steps=5)
    a = integrate_samples(flow_model, ctx, 4, cfg, k=2, batch_size=8, seed=3)
    b = integrate_samples(flow_model, ctx, 4, cfg, k=2, batch_size=8, seed=3)
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        integrate_samples(flow_model, np.zeros((20, 3)), 4, cfg, k=2)
    with pytest.raises(ValueError):
        integrate_samples(flow_model, ctx, 4, cfg, k=0)


def test_zero_field_leaves_noise_unchanged(flow_model):
    # zero-initialized head: the field is zero, so samples stay at x0
    cfg = FlowConfig(n_integration_steps=5)
    out = integrate_samples(flow_model, np.ones((10, 2)), 6, cfg, k=1, batch_size=4, seed=9)
    np.testing.assert_array_equal(out, np.random.default_rng(9).standard_normal((1, 6, 2))[0])


def test_sample_csv_round_trip(tmp_path):
    pts = np.random.default_rng(0).standard_normal((5, 3))
    (tmp_path / "p.csv").write_text(samples_to_csv(pts))
    np.testing.assert_array_equal(read_points_csv(tmp_path / "p.csv"), pts)
    assert samples_to_csv(np.zeros((0, 2))) == "x0,x1\n"
    (tmp_path / "raw.csv").write_text("1,2\n3,4\n")
    np.testing.assert_array_equal(read_points_csv(tmp_path / "raw.csv"), [[1, 2], [3, 4]])
