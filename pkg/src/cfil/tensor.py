"""Dense tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a row-major numpy array. Every differentiable
operation is a :class:`Function` subclass; applying one records the
function on its output, so the graph reachable from a scalar root can be
flattened into a :class:`ComputationTrace` and replayed in reverse.
"""

from __future__ import annotations

import contextlib
from typing import Iterator, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError  # noqa: F401

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Dense real array with an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "creator", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        for extent in arr.shape:
            if extent < 1:
                raise DimensionError(f"all extents must be >= 1, got shape {arr.shape}")
        self.data: np.ndarray = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.creator: Function | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, creator: "Function | None", requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.ascontiguousarray(arr)
        out.grad = None
        out.requires_grad = requires_grad
        out.creator = creator
        out.name = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, None, False)

    def zero_grad(self) -> None:
        self.grad = None

    def astype(self, dtype) -> "Tensor":
        """Leaf copy in another precision, keeping requires_grad."""
        out = Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)
        out.name = self.name
        return out

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar; the functional forms live in cfil.ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            return ops.mul(self, other)
        return ops.scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


class Function:
    """One differentiable operation.

    Subclasses implement ``forward`` on raw arrays and ``backward``, which
    maps the output gradient to one gradient per input (``None`` for inputs
    that need none). Intermediates needed by ``backward`` are stored on
    ``self`` during ``forward``.
    """

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs
        self.needs = tuple(t.requires_grad for t in inputs)

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        fn = cls(*inputs)
        for key, value in kwargs.items():
            setattr(fn, key, value)
        out = fn.forward(*(t.data for t in inputs))
        track = _grad_enabled and any(fn.needs)
        return Tensor._wrap(out, fn if track else None, track)


class ComputationTrace:
    """Executed operations reachable from a root, in topological order.

    Inputs of a node always precede it. The order is deterministic: a
    depth-first walk that visits inputs left to right.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "ComputationTrace":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            if node.creator is not None:
                for parent in reversed(node.creator.inputs):
                    if parent.requires_grad and id(parent) not in seen:
                        stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def leaves(self) -> list[Tensor]:
        return [t for t in self.nodes if t.creator is None]


def backward(root: Tensor, trace: ComputationTrace | None = None) -> ComputationTrace:
    """Accumulate d(root)/d(t) into ``t.grad`` for every leaf on the trace.

    Leaves that are on the trace but receive no gradient signal end with an
    all-zero grad. Intermediate tensors do not keep their gradients.
    """
    if root.size != 1:
        raise ContractError(f"backward() needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ContractError("root does not depend on any tensor that requires grad")
    if trace is None:
        trace = ComputationTrace.from_root(root)

    pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(trace.nodes):
        grad = pending.pop(id(node), None)
        fn = node.creator
        if fn is None:
            if grad is None:
                grad = np.zeros_like(node.data)
            if node.grad is None:
                node.grad = grad.copy()
            else:
                node.grad += grad
            continue
        if grad is None:
            continue
        input_grads = fn.backward(grad)
        for parent, g, need in zip(fn.inputs, input_grads, fn.needs):
            if not need or g is None:
                continue
            if g.shape != parent.shape:
                raise DimensionError(
                    f"{type(fn).__name__}.backward produced grad of shape {g.shape} "
                    f"for input of shape {parent.shape}"
                )
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + g
            else:
                pending[key] = g
    return trace
