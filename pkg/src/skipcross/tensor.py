"""Dense tensors with reverse-mode differentiation.

Every differentiable op that runs while recording is enabled appends a
:class:`Node` to the tape. Nodes carry a monotonically increasing sequence
number, so the part of the tape reachable from a loss can be replayed in
reverse record order by :func:`backward`.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

_FLOATS = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operand shapes are incompatible; ``dim`` names the offending dimension."""

    def __init__(self, message: str, dim: str | None = None):
        super().__init__(message)
        self.dim = dim


class TapeError(RuntimeError):
    pass


class _TapeState(threading.local):
    def __init__(self):
        self.enabled = True


_state = _TapeState()
_seq = itertools.count()


@contextmanager
def no_grad():
    prev = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def is_recording() -> bool:
    return _state.enabled


class Node:
    """One tape record: the inputs of an op and the closure mapping output adjoint to input adjoints."""

    __slots__ = ("seq", "inputs", "backward_fn", "op")

    def __init__(self, op: str, inputs: Sequence["Tensor"], backward_fn: Callable):
        self.seq = next(_seq)
        self.op = op
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn

    def __repr__(self):
        return f"Node({self.op}, seq={self.seq})"


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOATS:
            arr = arr.astype(np.float32 if dtype is None else dtype)
        if arr.ndim > 4:
            raise ShapeError(f"rank {arr.ndim} exceeds 4", dim="rank")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self.node: Node | None = None
        self.name = name

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _from_op(cls, data: np.ndarray, op: str, inputs: Sequence["Tensor"], backward_fn) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.requires_grad = False
        out.node = None
        if _state.enabled and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out.node = Node(op, inputs, backward_fn)
        return out

    # -- accessors --------------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0

    def set_requires_grad(self, flag: bool):
        if not self.is_leaf:
            raise TapeError("requires_grad can only be toggled on leaf tensors")
        self.requires_grad = bool(flag)
        self.grad = np.zeros_like(self.data) if flag else None

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def detach(self) -> "Tensor":
        return Tensor(self.data, name=self.name)

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


def tensor(data, requires_grad=False, dtype=None, name=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def parameter(data, dtype=None, name=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype, name=name)


def tape_of(loss: Tensor) -> list[Node]:
    """The recorded nodes reachable from ``loss``, in record order."""
    seen: dict[int, Node] = {}
    stack = [loss.node] if loss.node is not None else []
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen[id(node)] = node
        for t in node.inputs:
            if t.node is not None and id(t.node) not in seen:
                stack.append(t.node)
    return sorted(seen.values(), key=lambda n: n.seq)


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf with requires_grad."""
    if loss.data.ndim != 0:
        raise ShapeError(f"backward needs a rank-0 loss, got shape {loss.shape}", dim="rank")
    if loss.node is None:
        raise TapeError("loss was not produced under an active tape (no recorded ops reach it)")
    adjoint: dict[int, np.ndarray] = {id(loss.node): np.ones_like(loss.data)}
    for node in reversed(tape_of(loss)):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            if t.node is None:
                t.grad += gi
            else:
                key = id(t.node)
                if key in adjoint:
                    adjoint[key] = adjoint[key] + gi
                else:
                    adjoint[key] = gi
