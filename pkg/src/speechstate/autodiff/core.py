"""Tensor value type, operation tape and reverse-mode traversal."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..errors import DimensionError, UsageError

_ids = itertools.count()
_tape_stack: list["Tape"] = []


class Tensor:
    """Immutable dense array with a flag saying whether gradients flow into it.

    Data is held as float64. The underlying array is marked read-only so a
    tensor can be shared between threads; optimizers swap in a fresh array
    instead of writing in place.
    """

    __slots__ = ("_data", "requires_grad", "id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self._data = arr
        self.requires_grad = bool(requires_grad)
        self.id = next(_ids)
        self.name = name

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def size(self) -> int:
        return self._data.size

    def numpy(self) -> np.ndarray:
        return self._data

    def assign(self, value: np.ndarray) -> None:
        """Replace the stored values (shape must not change)."""
        arr = np.array(value, dtype=np.float64)
        if arr.shape != self._data.shape:
            raise DimensionError(f"cannot assign shape {arr.shape} to tensor of shape {self.shape}")
        arr.flags.writeable = False
        self._data = arr

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # elementwise arithmetic; enough to express losses and tests
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tsum(self) * (1.0 / self.size)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class TapeEntry:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    saved: dict = field(default_factory=dict)


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops executed inside the block whose inputs
    require gradients append an entry. Entries are appended after their
    inputs exist, so the list is already in topological order.
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack.remove(self)
        return False

    def __len__(self):
        return len(self.entries)

    def record(self, op, inputs, output, backward, **saved):
        self.entries.append(TapeEntry(op, tuple(inputs), output, backward, saved))


def active_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


def make_output(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward, **saved) -> Tensor:
    """Wrap ``data`` and put it on the active tape when any input needs grad."""
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(op, inputs, out, backward, **saved)
    return out


def backward(loss: Tensor, tape: Tape, params: Sequence[Tensor] | None = None) -> dict[int, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to tensors on ``tape``.

    Returns a map from tensor id to gradient array for every leaf tensor that
    requires grad and was reached. Tensors listed in ``params`` that the loss
    does not depend on get zero gradients.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    produced = {e.output.id for e in tape.entries}
    for entry in reversed(tape.entries):
        g = grads.pop(entry.output.id, None)
        if g is None:
            continue
        in_grads = entry.backward(g)
        for t, gi in zip(entry.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t.id in grads:
                grads[t.id] = grads[t.id] + gi
            else:
                grads[t.id] = gi
    out = {k: v for k, v in grads.items() if k not in produced or k == loss.id}
    if loss.id in produced:
        out.pop(loss.id, None)
    if params is not None:
        for p in params:
            if p.id not in out:
                out[p.id] = np.zeros(p.shape)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from exc
    return make_output("add", data, (a, b),
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc
    return make_output("mul", data, (a, b),
                       lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    return make_output("neg", -a.data, (a,), lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    return make_output("pow", a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def tsum(a: Tensor) -> Tensor:
    return make_output("sum", np.array(a.data.sum()), (a,),
                       lambda g: (np.broadcast_to(g, a.shape).copy(),))


def reshape(a: Tensor, shape) -> Tensor:
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {tuple(shape)}") from exc
    return make_output("reshape", data, (a,), lambda g: (g.reshape(a.shape),))


def flatten(a: Tensor) -> Tensor:
    """Collapse every axis after the first."""
    return reshape(a, (a.shape[0], -1))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    return make_output("matmul", a.data @ b.data, (a, b),
                       lambda g: (g @ b.data.T, a.data.T @ g))
