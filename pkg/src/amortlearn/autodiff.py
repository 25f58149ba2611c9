"""Dense reverse-mode automatic differentiation on top of numpy.

Graphs are built define-by-run: every operation on a :class:`Tensor` that
requires gradients records its parents and the name of its backward rule.
Backward rules live in :data:`BACKWARD_RULES` keyed by op name so that tests
(and ``amortlearn gradcheck``) can swap a rule out and watch the finite
difference oracle catch it.

Only first-order derivatives are supported.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "BACKWARD_RULES",
    "backward",
    "grad",
    "stop_gradient",
    "no_grad",
    "enable_grad",
    "precision",
    "get_dtype",
    "finite_diff_check",
    "FiniteDiffReport",
    "matmul",
    "add",
    "mul",
    "sub",
    "div",
    "neg",
    "exp",
    "log",
    "square",
    "gelu",
    "softmax",
    "log_softmax",
    "layer_norm",
    "concat",
    "stack",
    "reshape",
    "transpose",
    "getitem",
    "tensor_sum",
    "tensor_mean",
    "embedding",
    "mse_loss",
    "cross_entropy",
]

MASK_NEG = -1e9

_STATE = {"dtype": np.dtype(np.float32), "grad_enabled": True}


def get_dtype() -> np.dtype:
    return _STATE["dtype"]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    prev = _STATE["dtype"]
    _STATE["dtype"] = np.dtype(dtype)
    try:
        yield
    finally:
        _STATE["dtype"] = prev


@contextlib.contextmanager
def no_grad():
    prev = _STATE["grad_enabled"]
    _STATE["grad_enabled"] = False
    try:
        yield
    finally:
        _STATE["grad_enabled"] = prev


@contextlib.contextmanager
def enable_grad():
    """Re-enable graph building inside a ``no_grad`` block."""
    prev = _STATE["grad_enabled"]
    _STATE["grad_enabled"] = True
    try:
        yield
    finally:
        _STATE["grad_enabled"] = prev


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse-mode AD."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_op", "_parents", "_ctx")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype != get_dtype():
            arr = arr.astype(get_dtype())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._op = None
        self._parents = ()
        self._ctx = None

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tensor_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], ctx=None) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    needs = _STATE["grad_enabled"] and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._op = op
        out._parents = tuple(parents)
        out._ctx = ctx
    else:
        out._op = None
        out._parents = ()
        out._ctx = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


BACKWARD_RULES: dict[str, Callable] = {}


def _rule(name: str):
    def register(fn):
        BACKWARD_RULES[name] = fn
        return fn

    return register


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data + b.data, "add", (a, b))


@_rule("add")
def _add_backward(g, out):
    a, b = out._parents
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data - b.data, "sub", (a, b))


@_rule("sub")
def _sub_backward(g, out):
    a, b = out._parents
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data * b.data, "mul", (a, b))


@_rule("mul")
def _mul_backward(g, out):
    a, b = out._parents
    ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
    gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
    return ga, gb


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data / b.data, "div", (a, b))


@_rule("div")
def _div_backward(g, out):
    a, b = out._parents
    ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
    gb = _unbroadcast(-g * out.data / b.data, b.shape) if b.requires_grad else None
    return ga, gb


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, "neg", (a,))


@_rule("neg")
def _neg_backward(g, out):
    return (-g,)


def square(a) -> Tensor:
    a = _as_tensor(a)
    return _make(a.data * a.data, "square", (a,))


@_rule("square")
def _square_backward(g, out):
    (a,) = out._parents
    return (2.0 * g * a.data,)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.exp(a.data), "exp", (a,))


@_rule("exp")
def _exp_backward(g, out):
    return (g * out.data,)


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.log(a.data), "log", (a,))


@_rule("log")
def _log_backward(g, out):
    (a,) = out._parents
    return (g / a.data,)


_SQRT_2_OVER_PI = 0.7978845608028654


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = _as_tensor(a)
    x = a.data
    inner = _SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)
    th = np.tanh(inner)
    return _make(0.5 * x * (1.0 + th), "gelu", (a,), th)


@_rule("gelu")
def _gelu_backward(g, out):
    (a,) = out._parents
    x = a.data
    th = out._ctx
    dinner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x * x)
    return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects operands with ndim >= 2")
    return _make(np.matmul(a.data, b.data), "matmul", (a, b))


@_rule("matmul")
def _matmul_backward(g, out):
    a, b = out._parents
    ga = gb = None
    if a.requires_grad:
        if b.ndim == 2:
            ga = np.matmul(g, b.data.T).reshape(a.shape) if a.ndim == g.ndim else _unbroadcast(np.matmul(g, b.data.T), a.shape)
        else:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
    if b.requires_grad:
        if b.ndim == 2 and a.ndim >= 2:
            # fold batch dims so the weight gradient is one GEMM
            a2 = a.data.reshape(-1, a.shape[-1]) if a.ndim == g.ndim else np.broadcast_to(a.data, g.shape[:-1] + (a.shape[-1],)).reshape(-1, a.shape[-1])
            gb = a2.T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
    return ga, gb


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), "sum", (a,), (axis, keepdims))


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


@_rule("sum")
def _sum_backward(g, out):
    (a,) = out._parents
    axis, keepdims = out._ctx
    return (np.array(_expand_reduced(g, a.shape, axis, keepdims)),)


def tensor_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    data = np.asarray(a.data.mean(axis=axis, keepdims=keepdims), dtype=a.dtype)
    count = a.data.size // max(data.size, 1)
    return _make(data, "mean", (a,), (axis, keepdims, count))


@_rule("mean")
def _mean_backward(g, out):
    (a,) = out._parents
    axis, keepdims, count = out._ctx
    return (np.array(_expand_reduced(g, a.shape, axis, keepdims)) / count,)


# ---------------------------------------------------------------------------
# normalisation and attention primitives


def softmax(a, axis: int = -1, mask=None) -> Tensor:
    """Softmax along ``axis``; ``mask`` is an additive constant (0 or -1e9)."""
    a = _as_tensor(a)
    z = a.data if mask is None else a.data + np.asarray(mask, dtype=a.dtype)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)
    return _make(p, "softmax", (a,), axis)


@_rule("softmax")
def _softmax_backward(g, out):
    p = out.data
    axis = out._ctx
    return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    return _make(z - lse, "log_softmax", (a,), axis)


@_rule("log_softmax")
def _log_softmax_backward(g, out):
    axis = out._ctx
    p = np.exp(out.data)
    return (g - p * g.sum(axis=axis, keepdims=True),)


def layer_norm(a, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    a = _as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    parents = [a]
    y = xhat
    if gamma is not None:
        gamma = _as_tensor(gamma)
        parents.append(gamma)
        y = y * gamma.data
    if beta is not None:
        beta = _as_tensor(beta)
        parents.append(beta)
        y = y + beta.data
    return _make(y, "layer_norm", parents, (xhat, rstd, gamma is not None, beta is not None))


@_rule("layer_norm")
def _layer_norm_backward(g, out):
    xhat, rstd, has_gamma, has_beta = out._ctx
    parents = out._parents
    a = parents[0]
    grads = []
    gx = g * parents[1].data if has_gamma else g
    n = xhat.shape[-1]
    da = rstd * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).sum(axis=-1, keepdims=True) / n)
    grads.append(da if a.requires_grad else None)
    if has_gamma:
        grads.append(_unbroadcast(g * xhat, parents[1].shape))
    if has_beta:
        grads.append(_unbroadcast(g, parents[-1].shape))
    return tuple(grads)


# ---------------------------------------------------------------------------
# shape manipulation


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    return _make(data, "concat", ts, (axis, sizes))


@_rule("concat")
def _concat_backward(g, out):
    axis, sizes = out._ctx
    splits = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, splits, axis=axis))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in ts], axis=axis)
    return _make(data, "stack", ts, axis)


@_rule("stack")
def _stack_backward(g, out):
    axis = out._ctx
    n = len(out._parents)
    return tuple(np.take(g, i, axis=axis) for i in range(n))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    return _make(a.data.reshape(shape), "reshape", (a,))


@_rule("reshape")
def _reshape_backward(g, out):
    (a,) = out._parents
    return (g.reshape(a.shape),)


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    return _make(np.transpose(a.data, axes), "transpose", (a,), axes)


@_rule("transpose")
def _transpose_backward(g, out):
    axes = out._ctx
    if axes is None:
        return (np.transpose(g),)
    return (np.transpose(g, np.argsort(axes)),)


def getitem(a, index) -> Tensor:
    a = _as_tensor(a)
    return _make(a.data[index], "getitem", (a,), index)


@_rule("getitem")
def _getitem_backward(g, out):
    (a,) = out._parents
    full = np.zeros(a.shape, dtype=g.dtype)
    index = out._ctx
    if _is_basic_index(index):
        full[index] = g
    else:
        np.add.at(full, index, g)
    return (full,)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def embedding(table, indices) -> Tensor:
    """Row lookup ``table[indices]`` for an integer index array."""
    table = _as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    return _make(table.data[idx], "embedding", (table,), idx)


@_rule("embedding")
def _embedding_backward(g, out):
    (table,) = out._parents
    full = np.zeros(table.shape, dtype=g.dtype)
    np.add.at(full, out._ctx, g)
    return (full,)


def stop_gradient(t) -> Tensor:
    """Same values as ``t``; nothing flows back through the result."""
    t = _as_tensor(t)
    return Tensor(t.data, requires_grad=False)


# ---------------------------------------------------------------------------
# losses (composites)


def mse_loss(pred, target) -> Tensor:
    diff = sub(pred, target)
    return tensor_mean(square(diff))


def cross_entropy(logits, labels, axis: int = -1) -> Tensor:
    """Mean categorical cross entropy. ``labels`` are integer classes or a
    probability table with the same shape as ``logits``."""
    logits = _as_tensor(logits)
    lp = log_softmax(logits, axis=axis)
    labels = np.asarray(labels)
    if labels.shape != logits.shape:
        onehot = np.zeros(logits.shape, dtype=logits.dtype)
        np.put_along_axis(onehot, labels[..., None].astype(np.int64), 1.0, axis=-1)
        labels = onehot
    per_item = neg(tensor_sum(mul(lp, labels.astype(logits.dtype)), axis=axis))
    return tensor_mean(per_item)


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def _sweep(loss: Tensor):
    """Yield ``(leaf, gradient)`` pairs for every leaf reached from ``loss``."""
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._op is None:
            yield node, g
            continue
        parent_grads = BACKWARD_RULES[node._op](g, node)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = grads[key] + pg if key in grads else pg


def grad(loss: Tensor, inputs: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` w.r.t. ``inputs`` without touching any
    leaf's ``.grad``. Unreached inputs get zeros."""
    if loss.size != 1:
        raise ValueError(f"grad needs a scalar loss, got shape {loss.shape}")
    found: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        wanted = {id(t) for t in inputs}
        for node, g in _sweep(loss):
            if id(node) in wanted:
                found[id(node)] = found[id(node)] + g if id(node) in found else g
    out = [found.get(id(t), np.zeros_like(t.data)) for t in inputs]
    for g in out:
        if not np.isfinite(g).all():
            raise FloatingPointError("non-finite gradient")
    return out


def backward(loss: Tensor, params: Mapping[str, Tensor] | None = None, accumulate: bool = False) -> dict[str, np.ndarray]:
    """Reverse-mode sweep from a scalar ``loss``.

    Leaf tensors that require gradients get ``.grad`` set (added to when
    ``accumulate`` is true). Returns a map from parameter name to gradient; if
    ``params`` is given, every entry of it appears in the map, with zeros for
    leaves the loss does not depend on.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("non-finite loss")
    if params is not None and not accumulate:
        for p in params.values():
            p.grad = None
    if loss.requires_grad:
        for node, g in _sweep(loss):
            if not np.isfinite(g).all():
                raise FloatingPointError(f"non-finite gradient at leaf {node.name or node!r}")
            node.grad = g.astype(node.dtype, copy=True) if (node.grad is None or not accumulate) else node.grad + g
    if params is None:
        return {}
    out = {}
    for name, p in params.items():
        out[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
    return out


# ---------------------------------------------------------------------------
# finite difference oracle


class FiniteDiffReport(dict):
    """Per-parameter max relative error; ``max_rel_error`` is the overall max."""

    @property
    def max_rel_error(self) -> float:
        return max(self.values(), default=0.0)


def finite_diff_check(
    fn: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    step: float = 1e-3,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> FiniteDiffReport:
    """Compare backward() against central differences.

    The error per coordinate is |a - n| / max(|a| + |n|, floor). The floor
    keeps exactly-zero gradients (e.g. attention key biases, which only
    shift a softmax row) from being scored on rounding noise. With
    ``max_coords`` only a random subset of coordinates per parameter is probed.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    loss = fn(params)
    analytic = backward(loss, params)
    report = FiniteDiffReport()
    rng = rng or np.random.default_rng(0)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        a_flat = analytic[name].reshape(-1)
        worst = 0.0
        with no_grad():
            for i in coords:
                orig = flat[i]
                flat[i] = orig + step
                fp = float(fn(params).data)
                flat[i] = orig - step
                fm = float(fn(params).data)
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise FloatingPointError(f"fn returned non-finite value probing {name}[{i}]")
                num = (fp - fm) / (2.0 * step)
                ana = float(a_flat[i])
                err = abs(ana - num) / max(abs(ana) + abs(num), floor)
                worst = max(worst, err)
        report[name] = worst
    return report


def parameters_of(tensors: Iterable[Tensor]) -> dict[str, Tensor]:
    return {t.name or f"t{i}": t for i, t in enumerate(tensors)}
