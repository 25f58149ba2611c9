"""Parametric, explicit and implicit amortizers with one-step refinement.

Every model exposes the same two calls, batched over tasks:

* ``initial(n_tasks, qx)`` returns the learned starting state and the
  predictions it makes on the queries ``qx``.
* ``step(state, bx, by, qx, ...)`` consumes one minibatch ``(bx, by)`` and
  returns the refined state and its query predictions.

The caller owns the recurrence. Training wraps the incoming state in
``stop_gradient`` so that each step is optimized greedily.

Shapes: ``bx`` is ``(B, n, x_dim)``, ``by`` is ``(B, n)`` integer labels for
classification or ``(B, n, y_dim)`` for regression, and ``qx`` is
``(B, q, x_dim)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import MLP, Linear, Module, parameter
from .sequence_model import (
    GradientEncoder,
    ObservationEncoder,
    SequenceModelConfig,
    Transformer,
    VectorEncoder,
    build_implicit_mask,
    causal_mask,
    full_mask,
)
from .tasks.base import TaskData, split_minibatches

REGIMES = ("parametric", "explicit", "implicit")
SIGNALS = ("grad", "data", "grad_plus_data")
IMPLICIT_STATES = ("logits", "softmax", "pre_mlp")
KINDS = ("regression", "classification")


@dataclass
class RegimeConfig:
    regime: str = "parametric"
    signal: str = "data"
    steps_k: int = 10
    history_window: int = 0
    implicit_state: str = "logits"
    latent_tokens: int = 1
    latent_dim: int = 64
    explicit_predictor: str = "mlp"
    predictor_hidden: int = 64
    residual: bool = False

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.signal not in SIGNALS:
            raise ValueError(f"unknown signal {self.signal!r}")
        if self.regime == "implicit" and self.signal != "data":
            raise ValueError("implicit regime supports only the data signal")
        if self.steps_k < 1:
            raise ValueError("steps_k must be >= 1")
        if self.history_window < 0:
            raise ValueError("history_window must be >= 0")
        if self.history_window and self.regime != "parametric":
            raise ValueError("history windows are only defined for the parametric regime")
        if self.implicit_state not in IMPLICIT_STATES:
            raise ValueError(f"unknown implicit state {self.implicit_state!r}")
        if self.latent_tokens < 1 or self.latent_dim < 1:
            raise ValueError("explicit latents need at least one token of width >= 1")
        if self.explicit_predictor not in ("mlp", "linear"):
            raise ValueError(f"unknown explicit predictor {self.explicit_predictor!r}")

    @property
    def uses_grad(self) -> bool:
        return self.signal in ("grad", "grad_plus_data")

    @property
    def uses_data(self) -> bool:
        return self.signal in ("data", "grad_plus_data")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepResult:
    state: Tensor
    preds: Tensor
    prefix_preds: Tensor | None = None
    grad: np.ndarray | None = None


@dataclass
class RefinementTrace:
    """States ``0..k`` and the validation loss of each."""

    states: list[np.ndarray] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.states)


# ---------------------------------------------------------------------------
# fixed predictor and losses


def fixed_predict(x, theta) -> Tensor:
    """Linear predictor ``x @ W + b`` where ``theta = [vec(W), b]``.

    ``theta`` has ``(x_dim + 1) * C`` entries in its last axis; any leading
    axes are batch axes matched against those of ``x`` (which has one extra
    axis for the points).
    """
    x, theta = ad._as_tensor(x), ad._as_tensor(theta)
    dx = x.shape[-1]
    p = theta.shape[-1]
    if p % (dx + 1):
        raise ValueError(f"theta width {p} is not a multiple of x_dim + 1 = {dx + 1}")
    c = p // (dx + 1)
    lead = theta.shape[:-1]
    w = theta[..., : dx * c].reshape(*lead, dx, c)
    b = theta[..., dx * c :].reshape(*lead, 1, c)
    squeeze = x.ndim == 1
    if squeeze:
        x = x.reshape(1, dx)
    out = ad.matmul(x, w) + b
    return out.reshape(c) if squeeze else out


def one_hot(labels: np.ndarray, n: int) -> np.ndarray:
    return np.eye(n, dtype=ad.get_dtype())[np.asarray(labels, dtype=np.int64)]


def task_loss(kind: str, preds: Tensor, y: np.ndarray) -> Tensor:
    """Mean loss over all leading axes. ``y`` broadcasts against ``preds``."""
    if kind == "classification":
        labels = np.broadcast_to(np.asarray(y), preds.shape[:-1])
        return ad.cross_entropy(preds, labels)
    return ad.mse_loss(preds, np.broadcast_to(np.asarray(y), preds.shape))


def per_task_loss(kind: str, preds: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Loss per task (axis 0) as float64."""
    preds = np.asarray(preds, dtype=np.float64)
    if kind == "classification":
        z = preds - preds.max(axis=-1, keepdims=True)
        lp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        nll = -np.take_along_axis(lp, np.asarray(y, dtype=np.int64)[..., None], axis=-1)[..., 0]
        return nll.reshape(len(nll), -1).mean(axis=1)
    err = (preds - np.asarray(y, dtype=np.float64)) ** 2
    return err.reshape(len(err), -1).mean(axis=1)


def per_task_error(preds: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Classification error in percent per task; ties go to the lowest index."""
    wrong = np.argmax(preds, axis=-1) != np.asarray(y)
    return 100.0 * wrong.reshape(len(wrong), -1).mean(axis=1)


def _broadcast_rows(v: Tensor, lead: tuple[int, ...]) -> Tensor:
    """Repeat a parameter across leading axes while keeping it differentiable."""
    zeros = np.zeros(lead + v.shape, dtype=v.dtype)
    return v + zeros


# ---------------------------------------------------------------------------
# models


class Amortizer(Module):
    """Shared pieces: backbone, observation encoder, loss bookkeeping."""

    def __init__(
        self,
        regime: RegimeConfig,
        seq: SequenceModelConfig,
        x_dim: int,
        y_dim: int,
        kind: str,
        rng: np.random.Generator,
    ):
        if kind not in KINDS:
            raise ValueError(f"unknown task kind {kind!r}")
        self._regime = regime
        self._seq = seq
        self._x_dim, self._y_dim, self._kind = x_dim, y_dim, kind
        self.backbone = Transformer(seq, rng)
        self.obs_enc = ObservationEncoder(x_dim, y_dim, seq.d_model, rng)

    @property
    def regime(self) -> RegimeConfig:
        return self._regime

    @property
    def seq(self) -> SequenceModelConfig:
        return self._seq

    @property
    def x_dim(self) -> int:
        return self._x_dim

    @property
    def y_dim(self) -> int:
        return self._y_dim

    @property
    def kind(self) -> str:
        return self._kind

    @property
    def causal(self) -> bool:
        return self._seq.masking_scheme == "causal"

    def describe(self) -> dict:
        return {"x_dim": self._x_dim, "y_dim": self._y_dim, "kind": self._kind}

    # -- helpers ------------------------------------------------------------
    def _y_tokens_input(self, by) -> np.ndarray:
        if self._kind == "classification":
            return one_hot(by, self._y_dim)
        by = np.asarray(by, dtype=ad.get_dtype())
        return by if by.ndim == 3 else by[..., None]

    def encode_observations(self, bx, by) -> Tensor:
        bx = np.asarray(bx)
        if bx.shape[1] == 0:
            raise ValueError("empty minibatch")
        return self.obs_enc(bx, self._y_tokens_input(by))

    def loss(self, preds: Tensor, y) -> Tensor:
        return task_loss(self._kind, preds, y)

    def _check_batch(self, bx, by):
        bx = np.asarray(bx)
        if bx.ndim != 3 or bx.shape[-1] != self._x_dim:
            raise ValueError(f"minibatch x must be (B, n, {self._x_dim}), got {bx.shape}")
        if bx.shape[1] == 0:
            raise ValueError("empty minibatch")
        return bx


class _StatefulPredictorAmortizer(Amortizer):
    """Common machinery for the parametric and explicit regimes, where the
    state is read at a single position (or ``m`` latent positions) and a
    predictor maps (query, state) to outputs."""

    state_shape: tuple[int, ...]

    def predict(self, state, qx) -> Tensor:
        raise NotImplementedError

    def _state_tokens(self, state: Tensor) -> Tensor:
        raise NotImplementedError

    def _decode(self, h: Tensor) -> Tensor:
        raise NotImplementedError

    def signal_gradient(self, state: Tensor, bx, by) -> np.ndarray:
        """Mean minibatch-loss gradient w.r.t. each task's state (constant)."""
        with ad.enable_grad():
            leaf = Tensor(np.asarray(state.data), requires_grad=True)
            preds = self.predict(leaf, bx)
            loss = self.loss(preds, by) * float(leaf.shape[0])
            (g,) = ad.grad(loss, [leaf])
        if not np.isfinite(g).all():
            raise FloatingPointError("non-finite gradient signal")
        return g

    def _header(self, state: Tensor, grad: np.ndarray | None, history) -> tuple[list[Tensor], int]:
        """Tokens preceding the observations and the index of the current
        state token."""
        raise NotImplementedError

    def step(
        self,
        state: Tensor,
        bx,
        by,
        qx,
        prefixes: bool = False,
        history: Sequence[tuple[np.ndarray, np.ndarray | None]] = (),
        grad: np.ndarray | None = None,
    ) -> StepResult:
        state = ad._as_tensor(state)
        bx = self._check_batch(bx, by)
        reg = self._regime
        if reg.uses_grad and grad is None:
            grad = self.signal_gradient(state, bx, by)
        header, state_pos = self._header(state, grad if reg.uses_grad else None, history)
        parts = list(header)
        n_header = sum(t.shape[1] for t in header)
        if reg.uses_data:
            parts.append(self.encode_observations(bx, by))
        tokens = ad.concat(parts, axis=1)
        t = tokens.shape[1]
        h = self.backbone(tokens, causal_mask(t) if self.causal else full_mask(t))
        prefix_preds = None
        if self.causal:
            n_read = t - n_header + 1 if reg.uses_data else 1
            read = h[:, t - n_read :, :]
            decoded = self._decode(read)
            if reg.residual:
                decoded = decoded + ad.reshape(state, (state.shape[0], 1) + state.shape[1:])
            new_state = decoded[:, -1]
            if prefixes and reg.uses_data:
                # prefix i is read at observation i; drop the pre-data read
                prefix_states = decoded[:, 1:]
                prefix_preds = self.predict(prefix_states, np.asarray(qx)[:, None])
        else:
            new_state = self._decode_at(h, state_pos)
            if reg.residual:
                new_state = new_state + state
        preds = self.predict(new_state, qx)
        if prefixes and prefix_preds is None:
            prefix_preds = ad.reshape(preds, (preds.shape[0], 1) + preds.shape[1:])
        return StepResult(new_state, preds, prefix_preds, grad)

    def _decode_at(self, h: Tensor, pos: int) -> Tensor:
        return self._decode(h[:, pos : pos + 1])[:, 0]


class ParametricAmortizer(_StatefulPredictorAmortizer):
    """Infers the weights of a fixed linear predictor.

    Token order is ``[history..., state, (grad), obs_1..obs_n]``.
    """

    def __init__(self, regime, seq, x_dim, y_dim, kind, rng, zero_head: bool = True):
        super().__init__(regime, seq, x_dim, y_dim, kind, rng)
        p = (x_dim + 1) * y_dim
        self._p = p
        self.theta0 = parameter(np.zeros(p))
        self.state_enc = VectorEncoder(p, seq.d_model, rng)
        self.grad_enc = GradientEncoder(p, seq.d_model, rng) if regime.uses_grad else None
        self.decoder = Linear(seq.d_model, p, rng, init="zeros" if zero_head else "xavier")
        w = regime.history_window
        self.lag_emb = parameter(rng.normal(0.0, 0.02, size=(w + 1, seq.d_model))) if w else None

    @property
    def state_shape(self) -> tuple[int, ...]:
        return (self._p,)

    def initial(self, n_tasks: int, qx) -> StepResult:
        state = _broadcast_rows(self.theta0, (n_tasks,))
        return StepResult(state, self.predict(state, qx))

    def predict(self, state, qx) -> Tensor:
        return fixed_predict(np.asarray(qx, dtype=ad.get_dtype()), state)

    def _decode(self, h: Tensor) -> Tensor:
        return self.decoder(h)

    def _header(self, state, grad, history):
        w = self._regime.history_window
        entries = list(history)[-w:] if w else []
        if w and len(entries) < w:
            raise ValueError(f"history window {w} needs {w} past entries (pad with the initial state)")
        entries.append((state, grad))
        toks = []
        state_pos = 0
        for lag, (s, g) in enumerate(entries):
            lag_vec = None if self.lag_emb is None else self.lag_emb[lag]
            st = self.state_enc(s)
            if lag_vec is not None:
                st = st + lag_vec
            state_pos = len(toks)
            toks.append(ad.reshape(st, (st.shape[0], 1, st.shape[-1])))
            if self._regime.uses_grad:
                gt = self.grad_enc(g)
                if lag_vec is not None:
                    gt = gt + lag_vec
                toks.append(ad.reshape(gt, (gt.shape[0], 1, gt.shape[-1])))
        return toks, state_pos


class ExplicitPredictor(Module):
    """MLP on ``concat(x, flat latent)``; the first layer is split into an
    x part and a latent part so the latent is not copied per query."""

    def __init__(self, x_dim: int, z_dim: int, hidden: int, y_dim: int, rng: np.random.Generator, zero_last: bool = False):
        self.lin_x = Linear(x_dim, hidden, rng)
        self.lin_z = Linear(z_dim, hidden, rng, bias=False)
        self.head = MLP([hidden, hidden, y_dim], rng, zero_last=zero_last)

    def __call__(self, x, z: Tensor) -> Tensor:
        x, z = ad._as_tensor(x), ad._as_tensor(z)
        hz = self.lin_z(z)
        hz = ad.reshape(hz, hz.shape[:-1] + (1, hz.shape[-1]))
        return self.head(ad.gelu(self.lin_x(x) + hz))


class ExplicitAmortizer(_StatefulPredictorAmortizer):
    """Infers ``m`` latent tokens consumed by a learned predictor.

    Causal masking supports a single latent token. With ``explicit_predictor
    = "linear"`` the latent is read as the weights of the fixed linear map.
    """

    def __init__(self, regime, seq, x_dim, y_dim, kind, rng, zero_head: bool = True):
        super().__init__(regime, seq, x_dim, y_dim, kind, rng)
        m, ld = regime.latent_tokens, regime.latent_dim
        if seq.masking_scheme == "causal" and m != 1:
            raise ValueError("causal masking supports exactly one latent token")
        if regime.explicit_predictor == "linear" and m * ld != (x_dim + 1) * y_dim:
            raise ValueError("a linear explicit predictor needs m * latent_dim == (x_dim + 1) * y_dim")
        self._m, self._ld = m, ld
        self.latent0 = parameter(np.zeros((m, ld)))
        self.slot_emb = parameter(rng.normal(0.0, 0.02, size=(m, seq.d_model))) if m > 1 else None
        self.state_enc = VectorEncoder(ld, seq.d_model, rng)
        self.grad_enc = GradientEncoder(m * ld, seq.d_model, rng) if regime.uses_grad else None
        self.decoder = Linear(seq.d_model, ld, rng, init="zeros" if zero_head else "xavier")
        if regime.explicit_predictor == "mlp":
            self.predictor = ExplicitPredictor(x_dim, m * ld, regime.predictor_hidden, y_dim, rng, zero_last=zero_head)
        else:
            self.predictor = None

    @property
    def state_shape(self) -> tuple[int, ...]:
        return (self._m, self._ld)

    def initial(self, n_tasks: int, qx) -> StepResult:
        state = _broadcast_rows(self.latent0, (n_tasks,))
        return StepResult(state, self.predict(state, qx))

    def predict(self, state, qx) -> Tensor:
        state = ad._as_tensor(state)
        qx = np.asarray(qx, dtype=ad.get_dtype())
        if state.shape[-2:] != (self._m, self._ld):
            raise ValueError(f"latent must end in {(self._m, self._ld)}, got {state.shape}")
        flat = ad.reshape(state, state.shape[:-2] + (self._m * self._ld,))
        if self.predictor is None:
            return fixed_predict(qx, flat)
        return self.predictor(qx, flat)

    def _decode(self, h: Tensor) -> Tensor:
        # (B, r, d) -> (B, r, 1, ld) so each read position yields one latent
        out = self.decoder(h)
        return ad.reshape(out, out.shape[:-1] + (1, self._ld))

    def _decode_at(self, h: Tensor, pos: int) -> Tensor:
        return self.decoder(h[:, pos : pos + self._m])

    def _header(self, state, grad, history):
        if history:
            raise ValueError("explicit regime has no history window")
        st = self.state_enc(state)
        if self.slot_emb is not None:
            st = st + self.slot_emb
        toks = [st]
        if self._regime.uses_grad:
            g = np.asarray(grad).reshape(grad.shape[0], -1)
            gt = self.grad_enc(g)
            toks.append(ad.reshape(gt, (gt.shape[0], 1, gt.shape[-1])))
        return toks, 0


class ImplicitAmortizer(Amortizer):
    """Per-query states refined by attending to context minibatches.

    Context tokens are ``enc(x, y)``; query tokens reuse the encoder on
    ``(x_q, state)`` plus a learned query embedding. The ``pre_mlp`` variant
    instead carries the backbone output and embeds queries with a separate
    matrix.
    """

    def __init__(self, regime, seq, x_dim, y_dim, kind, rng, zero_head: bool = True):
        super().__init__(regime, seq, x_dim, y_dim, kind, rng)
        d = seq.d_model
        self._variant = regime.implicit_state
        if self._variant == "softmax" and kind != "classification":
            raise ValueError("softmax states need a classification task")
        self.query_emb = parameter(rng.normal(0.0, 0.02, size=d))
        if self._variant == "pre_mlp":
            self.h0 = parameter(np.zeros(d))
            self.query_enc = Linear(x_dim, d, rng)
            self.state_in = Linear(d, d, rng)
            self.head = MLP([d, d, y_dim], rng, zero_last=zero_head)
        else:
            self.y0 = parameter(np.zeros(y_dim))
            self.head = Linear(d, y_dim, rng, init="zeros" if zero_head else "xavier")

    @property
    def state_shape(self) -> tuple[int, ...]:
        return (self._seq.d_model,) if self._variant == "pre_mlp" else (self._y_dim,)

    def initial(self, n_tasks: int, qx) -> StepResult:
        q = np.asarray(qx).shape[1]
        if self._variant == "pre_mlp":
            state = _broadcast_rows(self.h0, (n_tasks, q))
            return StepResult(state, self.head(state))
        logits = _broadcast_rows(self.y0, (n_tasks, q))
        state = ad.softmax(logits, axis=-1) if self._variant == "softmax" else logits
        return StepResult(state, logits)

    def query_tokens(self, state: Tensor, qx) -> Tensor:
        qx = np.asarray(qx, dtype=ad.get_dtype())
        if self._variant == "pre_mlp":
            tok = self.query_enc(qx) + self.state_in(state)
        else:
            tok = self.obs_enc(qx, state)
        return tok + self.query_emb

    def step(self, state: Tensor, bx, by, qx, prefixes: Sequence[int] | np.ndarray | None = None) -> StepResult:
        state = ad._as_tensor(state)
        bx = self._check_batch(bx, by)
        qx = np.asarray(qx)
        if state.shape[:2] != qx.shape[:2]:
            raise ValueError(f"{state.shape[:2]} states for {qx.shape[:2]} queries")
        n, q = bx.shape[1], qx.shape[1]
        ctx = self.encode_observations(bx, by)
        tokens = ad.concat([ctx, self.query_tokens(state, qx)], axis=1)
        if prefixes is None:
            prefixes = np.full(q, n)
        mask = build_implicit_mask(n, prefixes, causal=self.causal)
        h = self.backbone(tokens, mask)[:, n:]
        if self._variant == "pre_mlp":
            return StepResult(h, self.head(h))
        logits = self.head(h)
        new = ad.softmax(logits, axis=-1) if self._variant == "softmax" else logits
        return StepResult(new, logits)


def build_amortizer(
    regime: RegimeConfig,
    seq: SequenceModelConfig,
    x_dim: int,
    y_dim: int,
    kind: str,
    seed: int = 0,
    zero_head: bool = True,
) -> Amortizer:
    rng = np.random.default_rng(seed)
    cls = {"parametric": ParametricAmortizer, "explicit": ExplicitAmortizer, "implicit": ImplicitAmortizer}[regime.regime]
    model = cls(regime, seq, x_dim, y_dim, kind, rng, zero_head=zero_head)
    model.parameters()
    return model


# ---------------------------------------------------------------------------
# refinement driver


def _pad_history(history: list, window: int, first) -> list:
    if len(history) >= window:
        return history[-window:] if window else []
    return [first] * (window - len(history)) + history


def refine(
    model: Amortizer,
    batches: Sequence[tuple[np.ndarray, np.ndarray]],
    qx: np.ndarray,
    qy: np.ndarray | None = None,
    keep_states: bool = True,
) -> tuple[list[np.ndarray], np.ndarray, list[np.ndarray]]:
    """Run ``len(batches)`` refinement steps without building training graphs.

    Returns ``(states, losses, preds)``: per-step states and query
    predictions (step 0 is the initial state) and a ``(k+1, B)`` array of
    per-task validation losses (NaN if ``qy`` is missing).
    """
    n_tasks = np.asarray(qx).shape[0]
    window = model.regime.history_window
    states, preds, losses = [], [], []
    with ad.no_grad():
        res = model.initial(n_tasks, qx)
        state = ad.stop_gradient(res.state)
        first_grad = None
        history: list = []

        def record(r):
            states.append(r.state.data.copy() if keep_states else None)
            preds.append(r.preds.data.copy())
            losses.append(per_task_loss(model.kind, r.preds.data, qy) if qy is not None else np.full(n_tasks, np.nan))

        record(res)
        for i, (bx, by) in enumerate(batches):
            if isinstance(model, ImplicitAmortizer):
                res = model.step(state, bx, by, qx)
            else:
                grad = model.signal_gradient(state, bx, by) if model.regime.uses_grad else None
                if first_grad is None:
                    first_grad = grad
                hist = _pad_history(history, window, (ad.stop_gradient(model.initial(n_tasks, qx).state), first_grad))
                res = model.step(state, bx, by, qx, history=hist, grad=grad)
                history.append((state, grad))
            state = ad.stop_gradient(res.state)
            record(res)
    return states, np.array(losses), preds


def task_batches(datas: Sequence[TaskData], batch_size: int, k: int, rng: np.random.Generator):
    """Stack ``k`` minibatches per task into ``(B, n, ...)`` arrays."""
    per_task = [split_minibatches(d, batch_size, k, rng)[0] for d in datas]
    out = []
    for step in range(k):
        bx = np.stack([pt[step][0] for pt in per_task])
        ys = [pt[step][1] for pt in per_task]
        by = None if ys[0] is None else np.stack(ys)
        out.append((bx, by))
    return out


def run_refinement(
    config: RegimeConfig,
    task,
    model: Amortizer,
    batch_size: int = 32,
    seed: int = 0,
    k: int | None = None,
) -> RefinementTrace:
    """Refine on one task for ``k`` steps (default ``config.steps_k``) and
    record the validation loss of every state."""
    k = config.steps_k if k is None else k
    if k < 1:
        raise ValueError("k must be >= 1")
    data = task.data if hasattr(task, "data") else task
    rng = np.random.default_rng(seed)
    batches = task_batches([data], batch_size, k, rng)
    qx = data.x_valid[None]
    qy = data.y_valid[None] if model.kind == "classification" else np.asarray(data.y_valid).reshape(1, len(data.y_valid), -1)
    states, losses, _ = refine(model, batches, qx, qy)
    return RefinementTrace([s[0] for s in states], [float(v) for v in losses[:, 0]])


def history_augmented_step(model: ParametricAmortizer, states: Sequence, grads: Sequence, bx, by, qx) -> StepResult:
    """One parametric step given the last ``w + 1`` states and gradients
    (oldest first); the final entries are the current state and gradient."""
    w = model.regime.history_window
    if len(states) != w + 1 or (model.regime.uses_grad and len(grads) != w + 1):
        raise ValueError(f"history window {w} needs exactly {w + 1} states and gradients")
    grads = list(grads) if model.regime.uses_grad else [None] * (w + 1)
    hist = list(zip(states[:-1], grads[:-1]))
    with ad.no_grad():
        return model.step(ad._as_tensor(states[-1]), bx, by, qx, history=hist, grad=grads[-1])
