"""Dense float64 tensors with a recorded computation graph.

Every primitive in :mod:`advcloud.engine.ops` wraps its numpy result in a
:class:`Tensor` and, when any input requires grad, attaches a :class:`Node`
holding the inputs and a closure mapping the output gradient to input
gradients. :func:`backward` orders the recorded nodes topologically and
visits each one exactly once, in reverse.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (thread-local)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible shapes."""

    def __init__(self, op: str, *shapes):
        shown = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {shown}")
        self.op = op
        self.shapes = shapes


@dataclass(eq=False)
class Node:
    """One recorded primitive: its name, inputs and vector-Jacobian product."""

    op: str
    inputs: tuple
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name", "__weakref__")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> "Graph":
        return backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic is delegated to ops (bound at the bottom of this module)
    def __add__(self, other):
        return ops.add(self, other)

    def __radd__(self, other):
        return ops.add(other, self)

    def __sub__(self, other):
        return ops.sub(self, other)

    def __rsub__(self, other):
        return ops.sub(other, self)

    def __mul__(self, other):
        return ops.mul(self, other)

    def __rmul__(self, other):
        return ops.mul(other, self)

    def __truediv__(self, other):
        return ops.div(self, other)

    def __rtruediv__(self, other):
        return ops.div(other, self)

    def __neg__(self):
        return ops.scale(self, -1.0)

    def sum(self, axis=None, keepdims=False):
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def relu(self):
        return ops.relu(self)

    def sigmoid(self):
        return ops.sigmoid(self)

    def log(self):
        return ops.log(self)

    def clamp(self, lo=None, hi=None):
        return ops.clamp(self, lo, hi)


def _not_scalar(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(op: str, data: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    """Wrap ``data`` as the output of ``op``; attach a node if grad is needed."""
    out = Tensor(data)
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, tuple(inputs), vjp)
    return out


@dataclass
class Graph:
    """Recorded operations reachable from a root, in topological order."""

    tensors: list = field(default_factory=list)

    @property
    def nodes(self) -> list:
        return [t.node for t in self.tensors]

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen or t.node is None:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in reversed(t.node.inputs):
                if p.node is not None and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.tensors)


def backward(loss: Tensor) -> Graph:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``.

    Leaf gradients accumulate across calls; intermediate gradients are
    dropped once consumed.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any tensor requiring grad")
    if loss.node is None:
        _accumulate(loss, np.ones_like(loss.data))
        return Graph([])
    graph = Graph.trace(loss)
    pending = {id(loss): np.ones_like(loss.data)}
    for t in reversed(graph.tensors):
        g = pending.pop(id(t), None)
        if g is None:
            continue
        node = t.node
        for inp, ig in zip(node.inputs, node.vjp(g)):
            if ig is None or not inp.requires_grad:
                continue
            if ig.shape != inp.data.shape:
                raise ShapeError(f"{node.op} backward", ig.shape, inp.data.shape)
            if inp.node is None:
                _accumulate(inp, ig)
            elif id(inp) in pending:
                pending[id(inp)] = pending[id(inp)] + ig
            else:
                pending[id(inp)] = ig
    return graph


def _accumulate(leaf: Tensor, g: np.ndarray) -> None:
    if leaf.grad is None:
        leaf.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        leaf.grad = leaf.grad + g


from advcloud.engine import ops  # noqa: E402  (ops imports this module)
