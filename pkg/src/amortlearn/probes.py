"""Structural probes: mask soundness, stop-gradient edges, and
prefix-parallel equivalence. Tests and the acceptance gate share them."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .amortizer import ImplicitAmortizer, RegimeConfig, build_amortizer
from .autodiff import Tensor
from .sequence_model import SequenceModelConfig


def _seq(scheme: str, d_model: int = 16, n_layers: int = 2, max_context: int = 64) -> SequenceModelConfig:
    return SequenceModelConfig(d_model=d_model, d_ffn=2 * d_model, n_heads=4, n_layers=n_layers, max_context=max_context, masking_scheme=scheme)


def _regression_batch(rng, b, n, x_dim):
    return rng.standard_normal((b, n, x_dim)), rng.standard_normal((b, n, 1))


def parametric_mask_case(rng: np.random.Generator, x_dim: int = 3) -> bool:
    """Perturb observations after a random prefix ``i``; the state read at
    prefix ``i`` must not change in a single bit."""
    model = build_amortizer(RegimeConfig("parametric", "data"), _seq("causal"), x_dim, 1, "regression", seed=int(rng.integers(1 << 30)), zero_head=False)
    n = int(rng.integers(2, 17))
    i = int(rng.integers(1, n))
    bx, by = _regression_batch(rng, 2, n, x_dim)
    qx = rng.standard_normal((2, 3, x_dim))
    state = rng.standard_normal((2, (x_dim + 1)))
    bx2, by2 = bx.copy(), by.copy()
    bx2[:, i:] += rng.standard_normal(bx2[:, i:].shape) * 10
    by2[:, i:] += rng.standard_normal(by2[:, i:].shape) * 10
    with ad.no_grad():
        a = model.step(Tensor(state), bx, by, qx, prefixes=True).prefix_preds.data
        b = model.step(Tensor(state), bx2, by2, qx, prefixes=True).prefix_preds.data
    return np.array_equal(a[:, :i], b[:, :i]) and not np.array_equal(a[:, i:], b[:, i:])


def implicit_mask_case(rng: np.random.Generator, x_dim: int = 3, causal: bool | None = None) -> bool:
    """Each query reads context ``1..j_q``. Perturbing context beyond ``j_q``
    and every other query must leave query ``q`` bit-identical.

    Under the non-causal scheme context tokens see each other, so queries
    read the whole context and only the other queries are blocked.
    """
    causal = bool(rng.integers(2)) if causal is None else causal
    model = build_amortizer(
        RegimeConfig("implicit", "data"), _seq("causal" if causal else "non_causal"), x_dim, 1, "regression", seed=int(rng.integers(1 << 30)), zero_head=False
    )
    n = int(rng.integers(2, 17))
    n_q = int(rng.integers(2, 6))
    prefixes = rng.integers(1, n + 1, size=n_q) if causal else np.full(n_q, n)
    target = int(np.argmin(prefixes)) if causal else int(rng.integers(n_q))
    j = int(prefixes[target])
    bx, by = _regression_batch(rng, 2, n, x_dim)
    qx = rng.standard_normal((2, n_q, x_dim))
    state = rng.standard_normal((2, n_q, 1))
    bx2, by2, qx2, state2 = bx.copy(), by.copy(), qx.copy(), state.copy()
    others = np.arange(n_q) != target
    qx2[:, others] += 5.0
    state2[:, others] -= 5.0
    if j < n:
        bx2[:, j:] += rng.standard_normal(bx2[:, j:].shape) * 10
        by2[:, j:] += 3.0
    with ad.no_grad():
        a = model.step(Tensor(state), bx, by, qx, prefixes=prefixes).state.data
        b = model.step(Tensor(state2), bx2, by2, qx2, prefixes=prefixes).state.data
    return np.array_equal(a[:, target], b[:, target])


def mask_soundness(n_cases: int = 100, seed: int = 0) -> dict[str, int]:
    """Number of passing random cases per scheme."""
    rng = np.random.default_rng(seed)
    return {
        "parametric_causal": sum(parametric_mask_case(rng) for _ in range(n_cases)),
        "implicit_query_prefix": sum(implicit_mask_case(rng) for _ in range(n_cases)),
    }


def stop_gradient_probe(regime: str, signal: str | None = None, scheme: str = "causal", seed: int = 0) -> tuple[float, float]:
    """Gradient norms of one step's loss w.r.t. the incoming state (through
    the stop-gradient edge) and w.r.t. the encoded fresh minibatch."""
    signal = signal or ("data" if regime == "implicit" else "grad_plus_data")
    rng = np.random.default_rng(seed)
    x_dim = 3
    model = build_amortizer(RegimeConfig(regime, signal, latent_dim=4, predictor_hidden=8), _seq(scheme), x_dim, 1, "regression", seed=seed, zero_head=False)
    bx, by = _regression_batch(rng, 2, 6, x_dim)
    qx = rng.standard_normal((2, 4, x_dim))
    qy = rng.standard_normal((2, 4, 1))
    init = model.initial(2, qx).state
    prev = Tensor(init.data + rng.standard_normal(init.shape), requires_grad=True)
    captured = {}
    original = model.encode_observations

    def leaf_tokens(x, y):
        captured["tokens"] = Tensor(original(x, y).data, requires_grad=True)
        return captured["tokens"]

    model.encode_observations = leaf_tokens
    try:
        if isinstance(model, ImplicitAmortizer):
            res = model.step(ad.stop_gradient(prev), bx, by, qx)
        else:
            res = model.step(ad.stop_gradient(prev), bx, by, qx)
        loss = model.loss(res.preds, qy)
        g_state, g_batch = ad.grad(loss, [prev, captured["tokens"]])
    finally:
        del model.encode_observations
    return float(np.abs(g_state).max()), float(np.abs(g_batch).max())


def prefix_equivalence(model, n: int = 16, seed: int = 0) -> np.ndarray:
    """Max abs difference, for each prefix ``i = 1..n``, between the
    prediction read at prefix ``i`` of one causal pass and a separate pass on
    the first ``i`` observations alone."""
    if not model.causal:
        raise ValueError("prefix equivalence needs a causal model")
    rng = np.random.default_rng(seed)
    x_dim = model.x_dim
    bx = rng.standard_normal((2, n, x_dim))
    by = rng.integers(0, model.y_dim, size=(2, n)) if model.kind == "classification" else rng.standard_normal((2, n, 1))
    qx = rng.standard_normal((2, 5, x_dim))
    implicit = isinstance(model, ImplicitAmortizer)
    diffs = np.zeros(n)
    with ad.no_grad():
        state = model.initial(2, qx).state
        if implicit:
            for i in range(1, n + 1):
                one = model.step(state, bx, by, qx, prefixes=np.full(5, i)).preds.data
                alone = model.step(state, bx[:, :i], by[:, :i], qx).preds.data
                diffs[i - 1] = np.abs(one - alone).max()
            return diffs
        grad = model.signal_gradient(state, bx, by) if model.regime.uses_grad else None
        full = model.step(state, bx, by, qx, prefixes=True, grad=grad).prefix_preds.data
        for i in range(1, n + 1):
            alone = model.step(state, bx[:, :i], by[:, :i], qx, grad=grad).preds.data
            diffs[i - 1] = np.abs(full[:, i - 1] - alone).max()
    return diffs
