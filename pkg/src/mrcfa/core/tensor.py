"""Dense tensor with a reverse-mode gradient tape.

Data lives in a numpy array of the globally configured precision. Every
differentiable op creates a new ``Tensor`` holding references to its inputs
and a closure that pushes the output gradient back to them. ``backward``
linearises the reachable graph into a tape (reverse topological order) and
replays it.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

_DTYPES = {"f32": np.float32, "f64": np.float64}


class _State(threading.local):
    # per thread, so concurrent inference workers cannot flip each other's mode
    def __init__(self):
        self.dtype = np.float64
        self.grad_enabled = True
        self.grads: Optional[dict[int, np.ndarray]] = None


_state = _State()


class DimensionError(ValueError):
    """Raised when tensor extents are incompatible with an operation."""


def set_precision(name: str) -> None:
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}, expected one of {sorted(_DTYPES)}")
    _state.dtype = _DTYPES[name]


def get_precision() -> str:
    return "f32" if _state.dtype is np.float32 else "f64"


def get_dtype() -> type:
    return _state.dtype


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    old = get_precision()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(old)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording; ops return leaf tensors."""
    old = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = old


def is_grad_enabled() -> bool:
    return _state.grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=get_dtype(), copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if any(n <= 0 for n in arr.shape):
            raise DimensionError(f"extents must be positive, got {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self.shape)

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        out.op = "leaf"
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar; the functional forms live in ops.py
    def __add__(self, other: "Tensor") -> "Tensor":
        from mrcfa.core import ops

        return ops.add(self, other)

    def __mul__(self, c: float) -> "Tensor":
        from mrcfa.core import ops

        return ops.scale(self, c)

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        from mrcfa.core import ops

        return ops.matmul(self, other)


def _not_scalar(shape) -> float:
    raise ValueError(f"item() needs a single-element tensor, got shape {shape}")


def make_result(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], None],
    op: str,
) -> Tensor:
    """Wrap an op output, recording it on the tape when any input needs grad."""
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(data, dtype=get_dtype()) if data.dtype != get_dtype() else data
    out.grad = None
    out.op = op
    needs = is_grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def build_tape(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` in topological order (inputs first)."""
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
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf reachable from the scalar ``loss``.

    Leaf gradients accumulate across calls until zeroed. Interior gradients
    are transient and released after the pass.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = build_tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            accumulate(node, g)
            continue
        # parents receive their share through send()
        _state.grads = grads
        node._backward(g)
    _state.grads = None


def send(t: Tensor, g: np.ndarray) -> None:
    """Deliver gradient ``g`` to input ``t`` during a backward pass."""
    if not t.requires_grad:
        return
    table = _state.grads
    if t._backward is None:
        accumulate(t, g)
        return
    prev = table.get(id(t))
    if prev is None:
        table[id(t)] = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        prev += g
