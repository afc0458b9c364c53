"""Dense float64 tensors and the tape that records operations on them.

Operations only record onto a tape while one is active (``with Tape() as tape``).
Outside a tape they run as plain numpy arithmetic, which is how inference runs.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import ContractError, NonFiniteError

_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "fmocc_active_tape", default=None
)

Vjp = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """A float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr is data:
            arr = arr.copy()
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # arithmetic sugar; implementations live in ops.py
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

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, idx):
        from . import ops
        return ops.getitem(self, idx)

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
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes)

    def flip(self, axis: int):
        from . import ops
        return ops.flip(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Vjp


@dataclass(eq=False)
class Tape:
    """Ordered record of executed operations.

    Nodes are appended in execution order, so every node's inputs were produced
    by an earlier node or are leaves. ``backward`` walks the record in reverse
    and clears it unless ``retain=True``.
    """

    nodes: list[Node] = field(default_factory=list)
    _token: contextvars.Token | None = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        if self._token is not None:
            raise ContractError("tape is already active")
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, vjp: Vjp) -> None:
        self.nodes.append(Node(op, inputs, output, vjp))

    def reset(self) -> None:
        self.nodes.clear()

    def backward(self, loss: Tensor, retain: bool = False) -> None:
        backward(loss, self, retain=retain)


def current_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


class no_tape:
    """Temporarily suspend recording, e.g. for a detached sub-computation."""

    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(None)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)


def make_result(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], vjp: Vjp) -> Tensor:
    """Wrap an op result, enforce finiteness and record it on the active tape."""
    out = np.asarray(out, dtype=np.float64)
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    requires_grad = any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, requires_grad)
    if requires_grad:
        tape = _ACTIVE_TAPE.get()
        if tape is not None:
            tape.record(op, inputs, result, vjp)
    return result


def backward(loss: Tensor, tape: Tape, retain: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf on the tape."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(n.output) for n in tape.nodes}
    seed = np.ones_like(loss.data)
    pending: dict[int, np.ndarray] = {}
    if id(loss) in produced:
        pending[id(loss)] = seed
    elif loss.requires_grad:
        _accumulate_leaf(loss, seed)

    for node in reversed(tape.nodes):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.vjp(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if gi.shape != inp.shape:
                raise ContractError(
                    f"{node.op}: gradient shape {gi.shape} != input shape {inp.shape}"
                )
            key = id(inp)
            if key in produced:
                prev = pending.get(key)
                pending[key] = gi.copy() if prev is None else prev + gi
            else:
                _accumulate_leaf(inp, gi)
    if not retain:
        tape.reset()


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad = t.grad + g


def zero_grads(params) -> None:
    for p in params:
        p.grad = None
