"""Finite-difference checks for every differentiable op, run in float64.

``stop_gradient`` is deliberately absent: its analytic gradient is zero by
definition while central differences see the underlying identity.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

TOLERANCE = 1e-3


def _param(rng, *shape, positive: bool = False) -> Tensor:
    data = rng.uniform(0.5, 2.0, size=shape) if positive else rng.standard_normal(shape)
    return Tensor(data, requires_grad=True)


def _weights(rng, shape):
    # random projection so every output coordinate matters
    return rng.standard_normal(shape)


def op_cases(seed: int = 0) -> dict[str, tuple[Callable, dict[str, Tensor]]]:
    """Name -> (scalar fn of params, params). Built inside float64 precision."""
    rng = np.random.default_rng(seed)
    cases: dict[str, tuple[Callable, dict[str, Tensor]]] = {}

    def add_case(name, fn, **params):
        for k, p in params.items():
            p.name = k
        cases[name] = (fn, params)

    a, b = _param(rng, 3, 4), _param(rng, 4)
    w34 = _weights(rng, (3, 4))
    add_case("add", lambda p: ad.tensor_sum(ad.add(p["a"], p["b"]) * w34), a=a, b=b)
    a, b = _param(rng, 3, 4), _param(rng, 3, 4)
    add_case("sub", lambda p: ad.tensor_sum(ad.sub(p["a"], p["b"]) * w34), a=a, b=b)
    a, b = _param(rng, 3, 4), _param(rng, 1, 4)
    add_case("mul", lambda p: ad.tensor_sum(ad.mul(p["a"], p["b"]) * w34), a=a, b=b)
    a, b = _param(rng, 3, 4), _param(rng, 3, 4, positive=True)
    add_case("div", lambda p: ad.tensor_sum(ad.div(p["a"], p["b"]) * w34), a=a, b=b)
    a = _param(rng, 3, 4)
    add_case("neg", lambda p: ad.tensor_sum(ad.neg(p["a"]) * w34), a=a)
    a = _param(rng, 3, 4)
    add_case("square", lambda p: ad.tensor_sum(ad.square(p["a"]) * w34), a=a)
    a = _param(rng, 3, 4)
    add_case("exp", lambda p: ad.tensor_sum(ad.exp(p["a"]) * w34), a=a)
    a = _param(rng, 3, 4, positive=True)
    add_case("log", lambda p: ad.tensor_sum(ad.log(p["a"]) * w34), a=a)
    a = _param(rng, 3, 4)
    add_case("gelu", lambda p: ad.tensor_sum(ad.gelu(p["a"]) * w34), a=a)
    a, b = _param(rng, 2, 3, 4), _param(rng, 4, 5)
    w235 = _weights(rng, (2, 3, 5))
    add_case("matmul", lambda p: ad.tensor_sum(ad.matmul(p["a"], p["b"]) * w235), a=a, b=b)
    a, b = _param(rng, 2, 3, 4), _param(rng, 2, 4, 5)
    add_case("matmul_batched", lambda p: ad.tensor_sum(ad.matmul(p["a"], p["b"]) * w235), a=a, b=b)
    a = _param(rng, 3, 4)
    w3 = _weights(rng, (3,))
    add_case("sum", lambda p: ad.tensor_sum(ad.tensor_sum(p["a"], axis=1) * w3), a=a)
    a = _param(rng, 3, 4)
    w4 = _weights(rng, (4,))
    add_case("mean", lambda p: ad.tensor_sum(ad.tensor_mean(p["a"], axis=0) * w4), a=a)
    a = _param(rng, 3, 4)
    mask = np.where(rng.uniform(size=(3, 4)) < 0.3, ad.MASK_NEG, 0.0)
    mask[:, 0] = 0.0
    add_case("softmax", lambda p: ad.tensor_sum(ad.softmax(p["a"], axis=-1, mask=mask) * w34), a=a)
    a = _param(rng, 3, 4)
    add_case("log_softmax", lambda p: ad.tensor_sum(ad.log_softmax(p["a"]) * w34), a=a)
    a, g, bb = _param(rng, 3, 4), _param(rng, 4), _param(rng, 4)
    add_case("layer_norm", lambda p: ad.tensor_sum(ad.layer_norm(p["a"], p["gamma"], p["beta"]) * w34), a=a, gamma=g, beta=bb)
    a, b = _param(rng, 3, 2), _param(rng, 3, 2)
    add_case("concat", lambda p: ad.tensor_sum(ad.concat([p["a"], p["b"]], axis=1) * w34), a=a, b=b)
    a, b = _param(rng, 3, 4), _param(rng, 3, 4)
    w234 = _weights(rng, (2, 3, 4))
    add_case("stack", lambda p: ad.tensor_sum(ad.stack([p["a"], p["b"]]) * w234), a=a, b=b)
    a = _param(rng, 3, 4)
    w43 = _weights(rng, (4, 3))
    add_case("transpose", lambda p: ad.tensor_sum(ad.transpose(p["a"]) * w43), a=a)
    a = _param(rng, 3, 4)
    w26 = _weights(rng, (2, 6))
    add_case("reshape", lambda p: ad.tensor_sum(ad.reshape(p["a"], (2, 6)) * w26), a=a)
    a = _param(rng, 5, 4)
    add_case("slice", lambda p: ad.tensor_sum(p["a"][1:4] * w34), a=a)
    a = _param(rng, 5, 4)
    idx = np.array([0, 2, 2])
    add_case("gather", lambda p: ad.tensor_sum(ad.getitem(p["a"], idx) * w34), a=a)
    t = _param(rng, 6, 4)
    emb_idx = np.array([[1, 5], [1, 0]])
    w224 = _weights(rng, (2, 2, 4))
    add_case("embedding", lambda p: ad.tensor_sum(ad.embedding(p["table"], emb_idx) * w224), table=t)
    logits = _param(rng, 4)
    add_case("cross_entropy", lambda p: ad.cross_entropy(ad.reshape(p["logits"], (1, 4)), np.array([2])), logits=logits)
    pred = _param(rng, 3, 2)
    target = rng.standard_normal((3, 2))
    add_case("mse_loss", lambda p: ad.mse_loss(p["pred"], target), pred=pred)
    return cases


def run_gradcheck(seed: int = 0, step: float = 1e-6, tolerance: float = TOLERANCE) -> tuple[bool, dict[str, float]]:
    """Check every op in float64. Returns ``(passed, per-op max rel error)``."""
    report = {}
    with ad.precision(np.float64):
        for name, (fn, params) in op_cases(seed).items():
            report[name] = ad.finite_diff_check(fn, params, step=step).max_rel_error
    return all(v < tolerance for v in report.values()), report


def meta_loss_case(regime: str, seed: int = 0, d_model: int = 32, k: int = 2, masking_scheme: str = "causal"):
    """Greedy meta-loss of one small update as a function of the model
    parameters. Built in float64.

    States entering each step and gradient tokens are computed once and held
    fixed, which is exactly what the stop-gradient objective differentiates,
    so finite differences and backprop target the same function.
    """
    from .amortizer import ImplicitAmortizer, RegimeConfig, build_amortizer, task_batches
    from .sequence_model import SequenceModelConfig
    from .tasks.linreg import LinRegFamily

    signal = "data" if regime == "implicit" else "grad_plus_data"
    fam = LinRegFamily(d=4, n_train=16, n_valid=8)
    seq = SequenceModelConfig(d_model=d_model, d_ffn=2 * d_model, n_heads=4, n_layers=1, max_context=8, masking_scheme=masking_scheme)
    model = build_amortizer(RegimeConfig(regime=regime, signal=signal, steps_k=k, latent_dim=8, predictor_hidden=8), seq, fam.x_dim, fam.y_dim, fam.kind, seed=seed, zero_head=False)
    model.astype(np.float64)
    rng = np.random.default_rng(seed)
    datas = [fam.sample(seed + i).data for i in range(2)]
    batches = task_batches(datas, 6, k, rng)
    qx = np.stack([d.x_valid for d in datas])
    qy = np.stack([d.y_valid for d in datas])
    qy = qy[..., None] if qy.ndim == 2 else qy
    implicit = isinstance(model, ImplicitAmortizer)

    # fixed inputs of every step
    with ad.no_grad():
        states = [ad.stop_gradient(model.initial(len(datas), qx).state)]
        grads = []
        for bx, by in batches:
            if implicit:
                res = model.step(states[-1], bx, by, qx)
                grads.append(None)
            else:
                g = model.signal_gradient(states[-1], bx, by)
                res = model.step(states[-1], bx, by, qx, grad=g)
                grads.append(g)
            states.append(ad.stop_gradient(res.state))

    def fn(_params):
        total = model.loss(model.initial(len(datas), qx).preds, qy) * (1.0 / k)
        for t, (bx, by) in enumerate(batches):
            s = Tensor(states[t].data)
            res = model.step(s, bx, by, qx) if implicit else model.step(s, bx, by, qx, grad=grads[t])
            total = total + model.loss(res.preds, qy) * (1.0 / k)
        return total

    return fn, model.parameters()


def run_meta_gradcheck(
    seed: int = 0, d_model: int = 32, max_coords: int = 4, step: float = 1e-4, tolerance: float = TOLERANCE, masking_scheme: str = "causal"
) -> tuple[bool, dict[str, float]]:
    """End-to-end check of the greedy meta-loss for every regime, probing
    ``max_coords`` random coordinates of each parameter tensor."""
    report = {}
    with ad.precision(np.float64):
        for regime in ("parametric", "explicit", "implicit"):
            fn, params = meta_loss_case(regime, seed=seed, d_model=d_model, masking_scheme=masking_scheme)
            rep = ad.finite_diff_check(fn, params, step=step, max_coords=max_coords, rng=np.random.default_rng(seed))
            report[regime] = rep.max_rel_error
    return all(v < tolerance for v in report.values()), report
