"""Dense tensor with reverse-mode differentiation.

A ``Tensor`` wraps a float64 numpy array.  Every primitive in
:mod:`uadi.core.ops` records its parents and a closure mapping the output
gradient to parent gradients; :func:`backward` replays those closures in
reverse topological order.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

DTYPE = np.float64

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible shapes."""

    def __init__(self, primitive: str, *shapes, detail: str = ""):
        parts = " vs ".join(str(tuple(s)) for s in shapes)
        msg = f"{primitive}: incompatible shapes {parts}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.primitive = primitive
        self.shapes = shapes


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data: np.ndarray = np.array(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.op = "leaf"

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
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # arithmetic sugar; definitions live in ops
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
        return ops.affine(self, -1.0, 0.0)

    def __pow__(self, exponent: float):
        from . import ops
        return ops.power(self, exponent)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap a primitive's output and record it when any parent needs grad."""
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=DTYPE)
    out.requires_grad = False
    out.grad = None
    out._parents = ()
    out._backward = None
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


@dataclass
class Graph:
    """Recorded primitive applications reachable from an output, inputs first."""

    nodes: list = field(default_factory=list)

    @classmethod
    def trace(cls, output: Tensor) -> "Graph":
        order: list = []
        seen: set = set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    graph = Graph.trace(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# text dump format: "shape: d0 d1 ..." header, then row-major values

def dumps(t, precision: int = 17) -> str:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=DTYPE)
    header = "shape:" + "".join(f" {d}" for d in arr.shape)
    fmt = f"%.{precision}g"
    body = " ".join(fmt % v for v in arr.reshape(-1))
    return header + "\n" + body + "\n"


def loads(text: str) -> np.ndarray:
    lines = text.split("\n", 1)
    head = lines[0].strip()
    if not head.startswith("shape:"):
        raise ValueError("tensor dump: missing 'shape:' header")
    shape = tuple(int(tok) for tok in head[len("shape:"):].split())
    values = np.array(lines[1].split() if len(lines) > 1 else [], dtype=DTYPE)
    expected = int(np.prod(shape)) if shape else 1
    if values.size != expected:
        raise ValueError(f"tensor dump: header shape {shape} needs {expected} values, found {values.size}")
    return values.reshape(shape)
