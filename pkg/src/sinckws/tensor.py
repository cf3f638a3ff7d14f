"""Dense tensor value type and a tape for reverse-mode differentiation.

Ops register themselves on the innermost active :class:`Tape`; when no tape
is active (inference) nothing is recorded.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

MAX_RANK = 3
DEFAULT_DTYPE = np.float32


class NonFiniteError(ArithmeticError):
    """Raised when an op produces NaN or Inf."""


class Tensor:
    """Rank <= 3 real array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim > MAX_RANK:
            raise ValueError(f"tensor rank {arr.ndim} exceeds {MAX_RANK}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
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
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else _not_scalar(self)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"


def _not_scalar(t: Tensor):
    raise ValueError(f"tensor of shape {t.shape} is not a scalar")


def check_finite(arr: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value produced by {where}")
    return arr


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class _Record:
    op: str
    inputs: tuple
    output: Tensor
    backward: BackwardFn


_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def current_tape() -> Optional["Tape"]:
    stack = _stack()
    return stack[-1] if stack else None


@dataclass
class Tape:
    """Ordered record of executed ops; confined to the thread that opened it."""

    records: list = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().remove(self)

    def __len__(self) -> int:
        return len(self.records)


def record(op: str, inputs: Sequence[Tensor], output: Tensor, backward_fn: BackwardFn) -> Tensor:
    """Attach ``backward_fn`` to ``output`` on the active tape, if any input needs it."""
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        if tape.consumed:
            raise RuntimeError("cannot record onto a consumed tape")
        output.requires_grad = True
        tape.records.append(_Record(op, tuple(inputs), output, backward_fn))
    return output


def backward(tape: Tape, loss: Tensor, params: Iterable[Tensor] = ()) -> list:
    """Propagate d(loss)/d(.) through ``tape`` in reverse execution order.

    Gradients are accumulated into the ``grad`` slot of every tensor reached.
    Returns the gradients for ``params`` in order; a parameter the loss does
    not depend on gets zeros.
    """
    if tape.consumed:
        raise RuntimeError("tape already consumed")
    if loss.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    tape.consumed = True

    pending = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = pending.pop(id(rec.output), None)
        if g is None:
            continue
        _accumulate(rec.output, g)
        grads = rec.backward(g)
        for inp, gi in zip(rec.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in pending:
                pending[key] = pending[key] + gi
            else:
                pending[key] = gi
    # what is left are leaves
    leaves = {}
    for rec in tape.records:
        for inp in rec.inputs:
            leaves[id(inp)] = inp
    leaves[id(loss)] = loss
    for key, g in pending.items():
        if key in leaves:
            _accumulate(leaves[key], g)

    out = []
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        out.append(p.grad)
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g
