"""Dense tensor with a reverse-mode gradient record.

Every differentiable primitive produces a `Tensor` whose `_node` links back to
its inputs together with a closure mapping the output gradient to input
gradients.  Nodes carry a global sequence number, so the tape replayed by
`backward` is simply the reachable nodes in decreasing execution order.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_SEQ = itertools.count()
_STATE = threading.local()

# Finite-output check after each primitive; can be switched off for speed.
CHECK_FINITE = True


def grad_enabled() -> bool:
    return getattr(_STATE, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = grad_enabled()
    _STATE.enabled = False
    try:
        yield
    finally:
        _STATE.enabled = prev


class GraphError(RuntimeError):
    """Raised on misuse of the gradient record (detached loss, double backward)."""


class _Node:
    __slots__ = ("parents", "backward_fn", "seq", "name", "consumed")

    def __init__(self, parents, backward_fn, name):
        self.parents = parents
        self.backward_fn = backward_fn
        self.seq = next(_SEQ)
        self.name = name
        self.consumed = False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64 if dtype is None else dtype)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def backward(self) -> None:
        backward(self)

    # -- operator sugar ---------------------------------------------------
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
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __pow__(self, p: float):
        from . import ops
        return ops.power(self, p)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
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


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        dtype = np.float64
    return Tensor(x, dtype=dtype)


def make_result(data: np.ndarray, parents: Sequence[Tensor],
                backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
                name: str) -> Tensor:
    """Wrap a primitive's output and, if needed, record it on the graph.

    `backward_fn(g)` must return one gradient (or None) per parent, each with
    the parent's shape.
    """
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{name}: non-finite values in output")
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = _Node(tuple(parents), backward_fn, name)
    return out


@dataclass
class GradTape:
    """Ordered record of the primitive ops reachable from a loss."""

    ops: list[tuple[Tensor, _Node]] = field(default_factory=list)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "GradTape":
        seen: set[int] = set()
        found: list[tuple[Tensor, _Node]] = []
        stack = [loss]
        while stack:
            t = stack.pop()
            node = t._node
            if node is None or id(node) in seen:
                continue
            seen.add(id(node))
            found.append((t, node))
            stack.extend(node.parents)
        # decreasing sequence number == reverse execution order
        found.sort(key=lambda item: item[1].seq, reverse=True)
        return cls(found)

    def __len__(self) -> int:
        return len(self.ops)

    def names(self) -> list[str]:
        return [node.name for _, node in self.ops]


def backward(loss: Tensor) -> GradTape:
    """Reverse-mode accumulation from a scalar loss into leaf `.grad` buffers."""
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        raise GraphError("loss is detached: no recorded operations lead to it")
    if loss._node.consumed:
        raise GraphError("backward already ran on this graph; rebuild it first")

    tape = GradTape.from_loss(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, node in tape.ops:
        g = grads.pop(id(out), None)
        node.consumed = True
        if g is None:
            continue
        parent_grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise GraphError(f"{node.name}: gradient shape {pg.shape} != {parent.shape}")
            if parent._node is None:
                if parent.grad is None:
                    parent.grad = np.array(pg, dtype=parent.data.dtype, copy=True)
                else:
                    parent.grad += pg
            else:
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        node.backward_fn = None  # free captured buffers
    return tape
