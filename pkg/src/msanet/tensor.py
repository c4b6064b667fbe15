"""Tensor, Parameter and a tape-based reverse-mode autodiff.

Only the trainable subgraph of the meta-learner is recorded. Anything computed
outside an active :class:`Tape` (backbone features, correlation maps) is a plain
constant as far as ``backward`` is concerned.
"""
from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float32
_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "msanet_active_tape", default=None
)


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class TapeError(RuntimeError):
    pass


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def float64_mode() -> Iterator[None]:
    """Temporarily switch newly created parameters and constants to 64-bit."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(np.float64)
    try:
        yield
    finally:
        set_default_dtype(previous)


class Tensor:
    """A dense array plus the flag telling the tape whether to track it."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"


def _not_scalar(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


class Parameter(Tensor):
    """A named leaf tensor. Frozen parameters never accumulate gradient."""

    __slots__ = ("grad", "trainable")

    def __init__(self, value, name: str = "", trainable: bool = True):
        super().__init__(value, requires_grad=trainable, name=name)
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)

    @property
    def value(self) -> np.ndarray:
        return self.data

    @value.setter
    def value(self, arr: np.ndarray) -> None:
        arr = np.asarray(arr)
        if arr.shape != self.data.shape:
            raise ShapeError(f"parameter {self.name!r}: expected {self.data.shape}, got {arr.shape}")
        self.data = arr
        if self.grad.dtype != arr.dtype:
            self.grad = np.zeros_like(arr)

    def freeze(self) -> None:
        self.trainable = False
        self.requires_grad = False

    def unfreeze(self) -> None:
        self.trainable = True
        self.requires_grad = True

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def astype(self, dtype) -> None:
        self.data = self.data.astype(dtype)
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        state = "trainable" if self.trainable else "frozen"
        return f"Parameter({self.name!r}, shape={self.shape}, {state})"


@dataclass
class _Record:
    out: Tensor
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    op: str


class Tape:
    """Ordered record of executed operations.

    Use as a context manager; every differentiable op executed inside the
    block whose inputs require gradient is appended in execution order, so
    the record is topologically sorted by construction. A tape supports
    exactly one :func:`backward` call.
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._outputs: set[int] = set()
        self._consumed = False
        self._token = None

    def __enter__(self) -> "Tape":
        if self._consumed:
            raise TapeError("cannot re-enter a tape that has already been consumed by backward()")
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    @property
    def consumed(self) -> bool:
        return self._consumed

    def __len__(self) -> int:
        return len(self._records)

    def ops(self) -> list[str]:
        return [r.op for r in self._records]

    def record(self, op: str, out: Tensor, inputs: Sequence, backward_fn) -> None:
        if self._consumed:
            raise TapeError("tape already consumed; start a new Tape for the next forward pass")
        self._records.append(_Record(out, tuple(inputs), backward_fn, op))
        self._outputs.add(id(out))

    def owns(self, t: Tensor) -> bool:
        return id(t) in self._outputs


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording, e.g. for evaluation inside a training loop."""
    token = _ACTIVE_TAPE.set(None)
    try:
        yield
    finally:
        _ACTIVE_TAPE.reset(token)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_output(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap a kernel result and record it on the active tape when needed."""
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op}: non-finite values in output")
    tape = _ACTIVE_TAPE.get()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs_grad)
    if needs_grad:
        tape.record(op, out, inputs, backward_fn)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(param) into ``.grad`` of every reachable trainable Parameter."""
    if tape.consumed:
        raise TapeError("backward() called twice on the same tape")
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not tape.owns(loss):
        raise TapeError("loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape._records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        input_grads = rec.backward(g)
        for inp, gi in zip(rec.inputs, input_grads):
            if gi is None or not inp.requires_grad:
                continue
            if gi.shape != inp.data.shape:
                raise ShapeError(
                    f"{rec.op}: gradient shape {gi.shape} does not match input shape {inp.data.shape}"
                )
            if isinstance(inp, Parameter):
                if inp.trainable:
                    inp.grad += gi
            else:
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
    tape._consumed = True
    tape._records.clear()
    tape._outputs.clear()
