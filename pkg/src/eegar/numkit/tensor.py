"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable primitive builds its output through ``_record``, which
attaches a ``Node`` (the op name, its parent tensors and a closure mapping the
output gradient to parent gradients).  ``backward`` linearises the graph
reachable from a scalar loss into a ``ComputeTape`` (parents before children)
and walks it once in reverse.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

# Additive mask value standing in for -inf: exp() underflows to exactly 0.0 and
# no inf - inf can appear in max-subtraction.
NEG_INF = -1e30


class NumkitError(Exception):
    """Base class for numkit failures."""


class DimensionError(NumkitError, ValueError):
    pass


class NonFiniteError(NumkitError, FloatingPointError):
    pass


class DegenerateSoftmaxError(NumkitError, ValueError):
    pass


class ContractError(NumkitError, ValueError):
    pass


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable recording on this thread (used for inference and finite differences)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@dataclass(eq=False)
class Node:
    op: str
    parents: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """Contiguous row-major float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, _check: bool = True):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        if _check and not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor{' ' + name if name else ''} of shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, _check=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar (implementations live in ops) -------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __pow__(self, exponent: float):
        from . import ops
        return ops.power(self, exponent)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        return ops.transpose(self, axes or None)

    @property
    def T(self):
        from . import ops
        return ops.transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(op, parents, backward)
    return out


@dataclass
class ComputeTape:
    """Recorded ops reachable from one loss, inputs always before consumers."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "ComputeTape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(loss, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for p in reversed(t.node.parents):
                    if p.requires_grad and id(p) not in seen:
                        stack.append((p, False))
        return cls([t for t in order if t.node is not None])

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Leaves listed in ``params`` that the loss does not depend on get an exact
    zero gradient.  Returns a map leaf -> gradient contributed by this call.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    params = list(params) if params is not None else []
    if loss.node is None and not loss.requires_grad:
        if not params:
            raise ContractError("loss was not produced by any recorded operation")
    tape = ComputeTape.from_loss(loss)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for t in reversed(tape.nodes):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        parent_grads = t.node.backward(g)
        for p, pg in zip(t.node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.shape:
                raise DimensionError(f"{t.node.op}: gradient shape {pg.shape} != input shape {p.shape}")
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            if p.node is None:
                leaves[key] = p
    if loss.node is None and loss.requires_grad:
        leaves[id(loss)] = loss

    result: dict[Tensor, np.ndarray] = {}
    for key, leaf in leaves.items():
        g = grads[key]
        result[leaf] = g
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    for p in params:
        if p not in result:
            result[p] = np.zeros_like(p.data)
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
    return result
