"""Differentiable primitives over :class:`Tensor`."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import (
    NEG_INF,
    ContractError,
    DegenerateSoftmaxError,
    DimensionError,
    Tensor,
    _record,
    as_tensor,
)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _record(out, (a, b), back, "div")


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    return _record(ad ** exponent, (a,), lambda g: (g * exponent * ad ** (exponent - 1),), "power")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _record(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _record(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def abs(a: Tensor) -> Tensor:
    ad = a.data
    return _record(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _record(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    pos = a.data > 0
    scale = np.where(pos, 1.0, slope)
    return _record(a.data * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def silu(a: Tensor) -> Tensor:
    ad = a.data
    sig = 1.0 / (1.0 + np.exp(-ad))
    return _record(ad * sig, (a,), lambda g: (g * sig * (1.0 + ad * (1.0 - sig)),), "silu")


# -- linear algebra -------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _record(ad @ bd, (a, b), back, "matmul")


# -- reductions ------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(a.data.sum(axis=axes, keepdims=keepdims), (a,), back, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return sum(a, axis=axes, keepdims=keepdims) * (1.0 / count)


# -- shape manipulation -----------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    return _record(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),), "swapaxes")


def getitem(a: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        raise ContractError("index with integer arrays, not tensors")
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _record(a.data[index], (a,), back, "getitem")


def take_rows(table: Tensor, ids) -> Tensor:
    """Gather rows ``table[ids]`` (embedding lookup); ``ids`` may be any int array."""
    ids = np.asarray(ids, dtype=np.intp)
    shape = table.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, *shape[1:]))
        return (out,)

    return _record(table.data[ids], (table,), back, "take_rows")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    return _record(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors),
                   lambda g: tuple(np.split(g, bounds, axis=ax)), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim
    return _record(out, tuple(tensors),
                   lambda g: tuple(np.take(g, i, axis=ax) for i in range(len(tensors))), "stack")


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _record(np.broadcast_to(a.data, shape).copy(), (a,),
                   lambda g: (_unbroadcast(g, old),), "broadcast_to")


# -- fused normalisations / activations -------------------------------------

def softmax_lastdim(x: Tensor, additive_mask=None) -> Tensor:
    """Softmax over the last axis with an optional additive 0 / NEG_INF mask.

    Masked entries come out exactly 0.  A slice with every entry masked is an
    error rather than a silent uniform distribution.
    """
    z = x.data
    if additive_mask is not None:
        m = additive_mask.data if isinstance(additive_mask, Tensor) else np.asarray(additive_mask, dtype=np.float64)
        try:
            z = z + m
        except ValueError as exc:
            raise DimensionError(f"mask of shape {m.shape} does not broadcast to {x.shape}") from exc
        if (z.max(axis=-1) <= NEG_INF / 2).any():
            raise DegenerateSoftmaxError("softmax slice with every entry masked")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record(out, (x,), back, "softmax")


def log_softmax_lastdim(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    sm = np.exp(out)
    return _record(out, (x,), lambda g: (g - sm * g.sum(axis=-1, keepdims=True),), "log_softmax")


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    """``x / rms(x) * weight`` over the last axis."""
    xd, wd = x.data, weight.data
    n = xd.shape[-1]
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    xhat = xd * inv

    def back(g):
        gw = _unbroadcast(g * xhat, wd.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * wd
            gx = inv * (gh - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / n)
        return gx, gw

    return _record(xhat * wd, (x, weight), back, "rms_norm")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy wants (N, K) logits and (N,) labels, got {logits.shape}, {labels.shape}")
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    rows = np.arange(n)
    loss = -logp[rows, labels].sum() / n

    def back(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g / n),)

    return _record(np.asarray(loss), (logits,), back, "cross_entropy")


def scatter_rows(values: Tensor, index: np.ndarray, n_rows: int) -> Tensor:
    """Place ``values[..., i, :]`` at row ``index[..., i]`` of a zero (..., n_rows, d) block.

    ``index`` has the shape of ``values`` minus the last axis; rows that no index
    points at stay exactly zero.  Duplicate indices within one leading slice add.
    """
    index = np.asarray(index, dtype=np.intp)
    lead = values.shape[:-2]
    d = values.shape[-1]
    out = np.zeros((*lead, n_rows, d))
    lead_idx = np.indices(index.shape)[:-1]
    full_index = (*lead_idx, index)
    np.add.at(out, full_index, values.data)
    return _record(out, (values,), lambda g: (g[full_index],), "scatter_rows")


__all__ = [
    "add", "sub", "mul", "div", "neg", "power", "exp", "log", "sqrt", "abs", "relu",
    "leaky_relu", "silu", "matmul", "sum", "mean", "reshape", "transpose", "swapaxes",
    "getitem", "take_rows", "concat", "stack", "broadcast_to", "softmax_lastdim",
    "log_softmax_lastdim", "rms_norm", "cross_entropy", "scatter_rows",
]
