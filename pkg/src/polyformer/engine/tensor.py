"""Tensor type and the reverse-mode tape."""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A non-finite value showed up where a finite one is required."""


class ContractError(RuntimeError):
    """An operation was called outside its documented preconditions."""


class _State(threading.local):
    def __init__(self):
        self.dtype = np.float32
        self.grad_enabled = True
        self.tape = Tape()


def default_dtype():
    return _state.dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype new tensors are created with.

    ``precision(np.float64)`` is the replay mode used for gradient checks.
    """
    prev = _state.dtype
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def grad_enabled() -> bool:
    return _state.grad_enabled


def current_tape() -> "Tape":
    return _state.tape


class Tensor:
    """An n-dimensional float array that may take part in differentiation.

    Leaves created by the user (parameters, inputs) hold ``grad`` after
    :func:`backward`; intermediate results never do.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "is_leaf", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        dtype = dtype or _state.dtype
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.is_leaf = True

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # operator sugar; implementations live in ops
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

    def __truediv__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            return ops.div(self, other)
        return ops.scale(self, 1.0 / float(other))

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    @property
    def T(self):
        from . import ops
        return ops.transpose(self)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


BackwardFn = Callable[[np.ndarray, Sequence[bool]], Sequence[Optional[np.ndarray]]]


@dataclass
class Record:
    output: Tensor
    inputs: tuple
    backward: BackwardFn
    op: str


@dataclass
class Tape:
    """Ordered operation records for one forward pass.

    ``seed`` is informational: stochastic ops draw from
    :func:`polyformer.engine.rng.rng_for` keyed by their own labels, so
    replaying the same op sequence reproduces the same values.
    """

    records: list = field(default_factory=list)
    seed: int = 0

    def __len__(self) -> int:
        return len(self.records)

    def reset(self) -> None:
        self.records.clear()


_state = _State()


def make_result(data: np.ndarray, inputs: tuple, backward: BackwardFn, op: str) -> Tensor:
    """Wrap an op output and, when a gradient is needed, record it on the tape."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.is_leaf = False
    out.requires_grad = _state.grad_enabled and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        _state.tape.records.append(Record(out, inputs, backward, op))
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires-grad leaf reachable from ``loss``.

    Records are visited in strict reverse order, each at most once, and the
    tape is cleared afterwards.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = _state.tape
    if not loss.requires_grad:
        tape.reset()
        return
    if not tape.records:
        raise ContractError("backward called on an empty tape")
    grads = {id(loss): np.ones_like(loss.data)}
    try:
        for rec in reversed(tape.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            needs = [t.requires_grad for t in rec.inputs]
            in_grads = rec.backward(g, needs)
            for t, need, gi in zip(rec.inputs, needs, in_grads):
                if not need or gi is None:
                    continue
                if gi.shape != t.data.shape:
                    raise DimensionError(f"{rec.op}: gradient shape {gi.shape} != input shape {t.data.shape}")
                if t.is_leaf:
                    t.grad = gi.copy() if t.grad is None else t.grad + gi
                else:
                    prev = grads.get(id(t))
                    grads[id(t)] = gi if prev is None else prev + gi
    finally:
        tape.reset()
