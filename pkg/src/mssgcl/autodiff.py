"""Small dense reverse-mode autodiff engine on float64 numpy arrays.

Every primitive returns a :class:`Tensor` that remembers its parents and a
closure pushing the output gradient back to them. ``Tensor.backward`` on a
scalar walks the recorded graph in reverse topological order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .errors import ContractError, ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, values, requires_grad: bool = False, _parents=(), _backward=None, op: str = ""):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], None] | None = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        if self.values.size != 1:
            raise ContractError(f"backward() needs a scalar root, got shape {self.shape}")
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.values)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: scale(self, -1.0)

    def __truediv__(self, c):
        if isinstance(c, Tensor):
            raise TypeError("division by a tensor is not supported; multiply by a constant instead")
        return scale(self, 1.0 / c)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _topological(root: Tensor) -> list[Tensor]:
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited or not node.requires_grad:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values, parents, backward, op) -> Tensor:
    rg = any(p.requires_grad for p in parents)
    return Tensor(values, rg, parents if rg else (), backward if rg else None, op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _make(
        a.values + b.values,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _make(
        a.values - b.values,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _make(
        a.values * b.values,
        (a, b),
        lambda g: (_unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)),
        "mul",
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.values * c, (a,), lambda g: (g * c,), "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _make(
        a.values @ b.values,
        (a, b),
        lambda g: (g @ b.values.T, a.values.T @ g),
        "matmul",
    )


def transpose(a: Tensor) -> Tensor:
    if a.values.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return _make(a.values.T, (a,), lambda g: (g.T,), "transpose")


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0
    return _make(np.where(mask, a.values, 0.0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.values
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def logsumexp_rows(a: Tensor) -> Tensor:
    """Row-wise ``log(sum(exp(a_i)))``; ``(n, m) -> (n,)``."""
    if a.values.ndim != 2:
        raise ShapeError(f"logsumexp_rows: expected a matrix, got shape {a.shape}")
    m = a.values.max(axis=1, keepdims=True)
    e = np.exp(a.values - m)
    s = e.sum(axis=1, keepdims=True)
    out = (m + np.log(s))[:, 0]
    soft = e / s
    return _make(out, (a,), lambda g: (g[:, None] * soft,), "logsumexp_rows")


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    out = a.values.sum(axis=axis)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape),)

    return _make(out, (a,), back, "sum")


def mean(a: Tensor) -> Tensor:
    n = a.values.size
    if n == 0:
        raise ShapeError("mean: empty tensor")
    return _make(a.values.mean(), (a,), lambda g: (np.full(a.shape, g / n),), "mean")


def concatenate(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concatenate: incompatible shapes {shapes} along axis {axis}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def back(g):
        return tuple(
            np.take(g, np.arange(bounds[k], bounds[k + 1]), axis=axis) for k in range(len(tensors))
        )

    return _make(out, tensors, back, "concatenate")


def l2_normalize_rows(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row to unit norm; rows with norm below ``eps`` pass through unchanged."""
    if a.values.ndim != 2:
        raise ShapeError(f"l2_normalize_rows: expected a matrix, got shape {a.shape}")
    norm = np.sqrt((a.values**2).sum(axis=1, keepdims=True))
    live = norm > eps
    safe = np.where(live, norm, 1.0)
    out = a.values / safe

    def back(g):
        proj = (g * out).sum(axis=1, keepdims=True)
        return (np.where(live, (g - out * proj) / safe, g),)

    return _make(out, (a,), back, "l2_normalize_rows")


def take_rows(a: Tensor, index) -> Tensor:
    """Gather rows ``a[index]``; repeated indices accumulate in the backward pass."""
    index = np.asarray(index, dtype=np.int64)
    n = a.shape[0]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise ShapeError(f"take_rows: index out of range for {n} rows")

    def back(g):
        out = np.zeros_like(a.values)
        np.add.at(out, index, g)
        return (out,)

    return _make(a.values[index], (a,), back, "take_rows")


def segment_sum(a: Tensor, segment_ids, num_segments: int) -> Tensor:
    """Sum rows of ``a`` sharing a segment id; ``(n, d) -> (num_segments, d)``."""
    ids = np.asarray(segment_ids, dtype=np.int64)
    if a.values.ndim != 2 or ids.shape != (a.shape[0],):
        raise ShapeError(f"segment_sum: data shape {a.shape} does not match segment ids {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= num_segments):
        raise ShapeError(f"segment_sum: segment id outside [0, {num_segments})")
    out = np.zeros((num_segments, a.shape[1]))
    np.add.at(out, ids, a.values)
    return _make(out, (a,), lambda g: (g[ids],), "segment_sum")


@dataclass
class BatchNormStats:
    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def fresh(cls, dim: int) -> "BatchNormStats":
        return cls(np.zeros(dim), np.ones(dim))


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    stats: BatchNormStats,
    training: bool,
    update_stats: bool = True,
) -> Tensor:
    """Per-feature normalization over the batch axis.

    Train mode uses batch statistics (biased variance) and, when
    ``update_stats`` is set, folds them into the running averages with
    momentum 0.9. Eval mode is the fixed affine map given by the running stats.
    """
    if x.values.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    if not training:
        inv = 1.0 / np.sqrt(stats.running_var + BN_EPS)
        xhat = (x.values - stats.running_mean) * inv
        out = gamma.values * xhat + beta.values
        return _make(
            out,
            (x, gamma, beta),
            lambda g: (g * gamma.values * inv, (g * xhat).sum(axis=0), g.sum(axis=0)),
            "batch_norm_eval",
        )
    mu = x.values.mean(axis=0)
    var = x.values.var(axis=0)
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x.values - mu) * inv
    out = gamma.values * xhat + beta.values
    if update_stats:
        stats.running_mean[:] = BN_MOMENTUM * stats.running_mean + (1 - BN_MOMENTUM) * mu
        stats.running_var[:] = BN_MOMENTUM * stats.running_var + (1 - BN_MOMENTUM) * var
    n = x.shape[0]

    def back(g):
        gx_hat = g * gamma.values
        gx = inv / n * (n * gx_hat - gx_hat.sum(axis=0) - xhat * (gx_hat * xhat).sum(axis=0))
        return gx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _make(out, (x, gamma, beta), back, "batch_norm")


def grad_check(fn: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-6) -> float:
    """Largest relative gap between reverse-mode and central-difference gradients.

    ``fn`` rebuilds the scalar from the current parameter values on every
    call. Relative error uses ``max(|a|, |b|, 1e-8)`` as denominator.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ContractError(f"grad_check eps must lie in [1e-6, 1e-3], got {eps}")
    params = list(params)
    for p in params:
        p.zero_grad()
    out = fn()
    if out.values.size != 1:
        raise ContractError(f"grad_check needs a scalar function, got shape {out.shape}")
    out.backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.values) if p.grad is None else p.grad.copy()
        flat = p.values.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            f_plus = fn().item()
            flat[k] = orig - eps
            f_minus = fn().item()
            flat[k] = orig
            numeric = (f_plus - f_minus) / (2 * eps)
            a = analytic.reshape(-1)[k]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
        p.zero_grad()
    return worst


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState) -> AdamState:
    """One bias-corrected Adam update in place; gradients are cleared afterwards."""
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"adam_step: parameter {name!r} has no gradient")
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for name, p in params.items():
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.values)
            state.v[name] = np.zeros_like(p.values)
        m, v = state.m[name], state.v[name]
        if m.shape != p.values.shape:
            raise ShapeError(f"adam_step: moment shape {m.shape} != parameter {name!r} shape {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.values -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.grad = None
    return state
