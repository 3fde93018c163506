"""Tensor, Parameter and the gradient tape."""

from __future__ import annotations

import contextlib
from contextvars import ContextVar
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np


class AutodiffError(RuntimeError):
    """Base class for errors raised by the autodiff core."""


class ShapeError(AutodiffError, ValueError):
    pass


class NonFiniteError(AutodiffError, FloatingPointError):
    """A forward operation produced NaN or infinity."""


class TapeError(AutodiffError):
    pass


_active_tape: ContextVar["Tape | None"] = ContextVar("ticl_active_tape", default=None)


class Tensor:
    """Array value with an optional gradient slot.

    Tensors created inside an active :class:`Tape` from inputs that require
    gradients are recorded on that tape; everything else is a constant.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # Operator sugar; implementations live in ops.py.
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

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """Named trainable leaf. ``frozen`` parameters never track or apply gradients."""

    __slots__ = ("name", "_frozen")

    def __init__(self, data, name: str = "", frozen: bool = False, dtype=None):
        super().__init__(np.array(data, dtype=dtype, copy=True), requires_grad=not frozen)
        self.name = name
        self._frozen = frozen

    @property
    def frozen(self) -> bool:
        return self._frozen

    @frozen.setter
    def frozen(self, value: bool) -> None:
        self._frozen = bool(value)
        self.requires_grad = not self._frozen
        if self._frozen:
            self.grad = None

    def freeze(self) -> None:
        self.frozen = True

    def clone(self, name: str | None = None, frozen: bool | None = None) -> "Parameter":
        return Parameter(
            self.data,
            name=self.name if name is None else name,
            frozen=self._frozen if frozen is None else frozen,
        )

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, frozen={self._frozen})"


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class OpRecord:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


@dataclass
class Tape:
    """Ordered record of differentiable operations for one training context.

    Use as a context manager to make it the active tape of the current
    thread/async context; nested ``no_grad`` blocks suspend recording.
    """

    records: list[OpRecord] = field(default_factory=list)
    _token: object = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def record(self, kind: str, inputs: tuple[Tensor, ...], output: Tensor, backward: BackwardFn) -> None:
        output._tape = self
        output.requires_grad = True
        self.records.append(OpRecord(kind, inputs, output, backward))

    def reset(self) -> None:
        for rec in self.records:
            rec.output._tape = None
            rec.output.requires_grad = False
        self.records.clear()

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise TapeError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            in_grads = rec.backward(g)
            for inp, gi in zip(rec.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if gi.shape != inp.shape:
                    raise ShapeError(f"{rec.kind}: gradient shape {gi.shape} != input shape {inp.shape}")
                if inp._tape is self:
                    key = id(inp)
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi
                else:
                    gi = gi.astype(inp.dtype, copy=False)
                    inp.grad = np.array(gi, copy=True) if inp.grad is None else inp.grad + gi
        self.reset()


def active_tape() -> Tape | None:
    return _active_tape.get()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording on the active tape; results are constants."""
    token = _active_tape.set(None)
    try:
        yield
    finally:
        _active_tape.reset(token)


def backward(loss: Tensor) -> None:
    """Backpropagate ``loss`` through the tape it was recorded on, then reset it."""
    if loss._tape is None:
        raise TapeError("loss is not on any tape (was it computed under no_grad?)")
    loss._tape.backward(loss)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))
