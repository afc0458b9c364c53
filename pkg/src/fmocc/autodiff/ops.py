"""Differentiable operations over :class:`Tensor`.

Each op computes its numpy result and hands a vector-Jacobian closure to
``make_result``. Elementwise binary ops follow numpy broadcasting; the
backward pass sums gradients back down to each operand's shape.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import ContractError, DimensionError
from .tensor import Tensor, as_tensor, make_result


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_result(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_result(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_result(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (
            unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        ),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return make_result(
        "div",
        out,
        (a, b),
        lambda g: (
            unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None,
        ),
    )


def matmul(a, b) -> Tensor:
    """``a[..., m, k] @ b[k, n]``; leading axes of ``a`` are treated as batch."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    k, n = b.shape

    def vjp(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        return ga, gb

    return make_result("matmul", a.data @ b.data, (a, b), vjp)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return make_result("sum", x.data.sum(axis=axis, keepdims=keepdims), (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.size // max(out.size, 1)
    shape = x.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape),)

    return make_result("mean", out, (x,), vjp)


def reshape(x: Tensor, shape) -> Tensor:
    return make_result("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return make_result(
        "transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),)
    )


def flip(x: Tensor, axis: int) -> Tensor:
    return make_result("flip", np.flip(x.data, axis), (x,), lambda g: (np.flip(g, axis),))


def getitem(x: Tensor, idx) -> Tensor:
    def vjp(g):
        out = np.zeros(x.shape)
        np.add.at(out, idx, g)
        return (out,)

    return make_result("getitem", x.data[idx], (x,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return make_result("stack", np.stack([t.data for t in tensors], axis=axis), tensors, vjp)


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return make_result(
        "broadcast_to",
        np.broadcast_to(x.data, shape).copy(),
        (x,),
        lambda g: (unbroadcast(g, x.shape),),
    )


# --- elementwise maps -----------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


# name -> (forward, derivative given (x, y))
UNARY = {
    "sigmoid": (_sigmoid, lambda x, y: y * (1.0 - y)),
    "softplus": (_softplus, lambda x, y: _sigmoid(x)),
    "exp": (np.exp, lambda x, y: y),
    "relu": (lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(np.float64)),
    "square": (np.square, lambda x, y: 2.0 * x),
    "log": (np.log, lambda x, y: 1.0 / x),
    "tanh": (np.tanh, lambda x, y: 1.0 - y * y),
    "sqrt": (np.sqrt, lambda x, y: 0.5 / y),
    "rsqrt": (lambda x: 1.0 / np.sqrt(x), lambda x, y: -0.5 * y / x),
}


def apply_unary(x, f: str) -> Tensor:
    if f not in UNARY:
        raise ContractError(f"unknown unary map {f!r}; expected one of {sorted(UNARY)}")
    x = as_tensor(x)
    fwd, deriv = UNARY[f]
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        y = fwd(x.data)
    return make_result(f, y, (x,), lambda g: (g * deriv(x.data, y),))


def sigmoid(x) -> Tensor:
    return apply_unary(x, "sigmoid")


def softplus(x) -> Tensor:
    return apply_unary(x, "softplus")


def exp(x) -> Tensor:
    return apply_unary(x, "exp")


def relu(x) -> Tensor:
    return apply_unary(x, "relu")


def square(x) -> Tensor:
    return apply_unary(x, "square")


def tanh(x) -> Tensor:
    return apply_unary(x, "tanh")


def rsqrt(x) -> Tensor:
    return apply_unary(x, "rsqrt")


# --- composite and fused layers -------------------------------------------


def layer_norm(x: Tensor, gain: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by ``gain``."""
    mu = mean(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = mean(square(xc), axis=-1, keepdims=True)
    return mul(mul(xc, rsqrt(add(var, eps))), gain)


def mse(pred: Tensor, target) -> Tensor:
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse: shapes {pred.shape} and {target.shape} differ")
    return mean(square(sub(pred, target)))


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits[..., K]``."""
    labels = np.asarray(labels)
    if logits.shape[:-1] != labels.shape:
        raise DimensionError(
            f"cross_entropy: logits {logits.shape} do not match labels {labels.shape}"
        )
    k = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ContractError(f"cross_entropy: labels outside [0, {k})")
    logp = log_softmax_np(logits.data).reshape(-1, k)
    flat = labels.reshape(-1)
    n = flat.size
    loss = -logp[np.arange(n), flat].mean()

    def vjp(g):
        grad = np.exp(logp)
        grad[np.arange(n), flat] -= 1.0
        return ((g / n) * grad.reshape(logits.shape),)

    return make_result("cross_entropy", np.asarray(loss), (logits,), vjp)
