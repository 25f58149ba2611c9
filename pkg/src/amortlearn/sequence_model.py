"""Pre-norm transformer backbone, token encoders, and attention masks.

No positional encodings are used anywhere: context observations are
exchangeable, and the attention mask carries all ordering the schemes need.

Two masking schemes are supported:

* ``causal``: a lower-triangular mask over ``[state, (grad), obs_1..obs_n]``
  so that the output at ``obs_i`` is the refined state given the first ``i``
  observations. Implicit models put query tokens after the context; query
  ``q`` sees context ``1..j_q`` and itself only.
* ``non_causal``: one context length ``n`` is drawn per training iteration
  and every context token sees every other one. Queries still never see
  each other.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import MASK_NEG, Tensor
from .nn import LayerNorm, Linear, Module, parameter

OBSERVATION, GRADIENT, STATE, QUERY = "observation", "gradient", "state", "query"


@dataclass
class SequenceModelConfig:
    d_model: int = 128
    d_ffn: int = 512
    n_heads: int = 4
    n_layers: int = 4
    activation: str = "gelu"
    norm_placement: str = "pre"
    max_context: int = 100
    masking_scheme: str = "causal"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.activation != "gelu":
            raise ValueError("only gelu activation is supported")
        if self.norm_placement != "pre":
            raise ValueError("only pre-norm blocks are supported")
        if self.masking_scheme not in ("causal", "non_causal"):
            raise ValueError(f"unknown masking scheme {self.masking_scheme!r}")
        if self.max_context < 1:
            raise ValueError("max_context must be >= 1")

    @classmethod
    def paper(cls, **overrides) -> "SequenceModelConfig":
        base = dict(d_model=512, d_ffn=2048, n_heads=8, n_layers=8, max_context=100)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TokenStream:
    """Encoded tokens (batch, T, d_model), their roles, and an additive mask."""

    tokens: Tensor
    roles: list[str]
    mask: np.ndarray

    def __post_init__(self):
        t = self.tokens.shape[-2]
        if len(self.roles) != t:
            raise ValueError("one role per token required")
        if self.mask.shape[-2:] != (t, t):
            raise ValueError(f"mask shape {self.mask.shape} does not match {t} tokens")


# ---------------------------------------------------------------------------
# attention-cost instrumentation

_COUNTER: dict = {"active": False, "pairs": 0}


@contextlib.contextmanager
def count_attention_pairs():
    """Count permitted (query, key) pairs per batch element, per layer pass.

    Yields a dict whose ``pairs`` entry is filled in on exit.
    """
    prev = dict(_COUNTER)
    _COUNTER.update(active=True, pairs=0)
    result = {"pairs": 0}
    try:
        yield result
    finally:
        result["pairs"] = _COUNTER["pairs"]
        _COUNTER.update(prev)


# ---------------------------------------------------------------------------
# masks


def _blocked_to_additive(allowed: np.ndarray) -> np.ndarray:
    return np.where(allowed, 0.0, MASK_NEG).astype(np.float32)


def causal_mask(n: int) -> np.ndarray:
    return _blocked_to_additive(np.tril(np.ones((n, n), dtype=bool)))


def full_mask(n: int) -> np.ndarray:
    return np.zeros((n, n), dtype=np.float32)


def build_parametric_causal_mask(n_obs: int, n_header: int = 1) -> np.ndarray:
    """Mask over ``n_header`` state/gradient tokens followed by ``n_obs``
    observation tokens. The read position for prefix ``i`` is ``n_header+i-1``."""
    if n_obs < 1:
        raise ValueError("n_obs must be >= 1")
    return causal_mask(n_header + n_obs)


def build_implicit_mask(n_ctx: int, query_prefix_lengths: Sequence[int], causal: bool = True) -> np.ndarray:
    """Context tokens first, then one token per query.

    Query ``q`` attends to context ``1..j_q`` and to itself; queries never see
    each other. Context is causal among itself (or fully connected when
    ``causal`` is false).
    """
    prefixes = np.asarray(query_prefix_lengths, dtype=int)
    if n_ctx < 1:
        raise ValueError("n_ctx must be >= 1")
    if prefixes.size and (prefixes.min() < 1 or prefixes.max() > n_ctx):
        raise ValueError(f"prefix lengths must lie in [1, {n_ctx}]")
    n_q = prefixes.size
    t = n_ctx + n_q
    allowed = np.zeros((t, t), dtype=bool)
    if causal:
        allowed[:n_ctx, :n_ctx] = np.tril(np.ones((n_ctx, n_ctx), dtype=bool))
    else:
        allowed[:n_ctx, :n_ctx] = True
    cols = np.arange(n_ctx)
    allowed[n_ctx:, :n_ctx] = cols[None, :] < prefixes[:, None]
    allowed[np.arange(n_ctx, t), np.arange(n_ctx, t)] = True
    return _blocked_to_additive(allowed)


def sample_noncausal_context(rng: np.random.Generator, max_context: int) -> int:
    if max_context < 1:
        raise ValueError("max_context must be >= 1")
    return int(rng.integers(1, max_context + 1))


# ---------------------------------------------------------------------------
# transformer


class MultiHeadAttention(Module):
    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.qkv = Linear(d_model, 3 * d_model, rng)
        self.out = Linear(d_model, d_model, rng)

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        b, t, d = x.shape
        h, dh = self.n_heads, self.d_head
        qkv = self.qkv(x).reshape(b, t, 3, h, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = ad.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        m = mask if mask.ndim == 2 else mask[:, None, :, :]
        if _COUNTER["active"]:
            allowed = np.broadcast_to(mask == 0, (b, t, t) if mask.ndim == 3 else (t, t))
            _COUNTER["pairs"] += int(allowed.sum()) // (b if mask.ndim == 3 else 1)
        attn = ad.softmax(scores, axis=-1, mask=m)
        ctx = ad.matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, t, d)
        return self.out(ctx)


class Block(Module):
    def __init__(self, cfg: SequenceModelConfig, rng: np.random.Generator):
        self.ln1 = LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng)
        self.ln2 = LayerNorm(cfg.d_model)
        self.fc1 = Linear(cfg.d_model, cfg.d_ffn, rng)
        self.fc2 = Linear(cfg.d_ffn, cfg.d_model, rng)

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        x = x + self.attn(self.ln1(x), mask)
        return x + self.fc2(ad.gelu(self.fc1(self.ln2(x))))


class Transformer(Module):
    def __init__(self, cfg: SequenceModelConfig, rng: np.random.Generator):
        self.blocks = [Block(cfg, rng) for _ in range(cfg.n_layers)]
        self.ln_f = LayerNorm(cfg.d_model)

    def __call__(self, tokens: Tensor, mask: np.ndarray) -> Tensor:
        t = tokens.shape[-2]
        if mask.shape[-2:] != (t, t):
            raise ValueError(f"mask shape {mask.shape} does not match {t} tokens")
        x = tokens
        for blk in self.blocks:
            x = blk(x, mask)
        return self.ln_f(x)

    def forward(self, stream: TokenStream) -> Tensor:
        return self(stream.tokens, stream.mask)


# ---------------------------------------------------------------------------
# token encoders


class ObservationEncoder(Module):
    """Linear map of concatenated (x, y) to a d_model token."""

    def __init__(self, x_dim: int, y_dim: int, d_model: int, rng: np.random.Generator, init: str = "xavier"):
        self.x_dim, self.y_dim = x_dim, y_dim
        self.proj = Linear(x_dim + y_dim, d_model, rng, init=init)

    def __call__(self, x, y) -> Tensor:
        x, y = ad._as_tensor(x), ad._as_tensor(y)
        if x.shape[-1] != self.x_dim or y.shape[-1] != self.y_dim:
            raise ValueError(
                f"observation encoder expects x dim {self.x_dim} and y dim {self.y_dim}, "
                f"got {x.shape[-1]} and {y.shape[-1]}"
            )
        return self.proj(ad.concat([x, y], axis=-1))


class VectorEncoder(Module):
    """Linear map of one flat vector (a state or a gradient) to a token."""

    def __init__(self, dim: int, d_model: int, rng: np.random.Generator, init: str = "xavier", check_finite: bool = False):
        self.dim = dim
        self.check_finite = check_finite
        self.proj = Linear(dim, d_model, rng, init=init)

    def __call__(self, v) -> Tensor:
        v = ad._as_tensor(v)
        if v.shape[-1] != self.dim:
            raise ValueError(f"expected vector of width {self.dim}, got {v.shape[-1]}")
        if self.check_finite and not np.isfinite(v.data).all():
            raise FloatingPointError("non-finite entries in encoded vector")
        return self.proj(v)


class GradientEncoder(VectorEncoder):
    def __init__(self, dim: int, d_model: int, rng: np.random.Generator, init: str = "xavier"):
        super().__init__(dim, d_model, rng, init=init, check_finite=True)


def learned_vector(d: int, rng: np.random.Generator, scale: float = 0.02) -> Tensor:
    return parameter(rng.normal(0.0, scale, size=d))
