"""Dense tensors with reverse-mode autodiff on an explicit tape.

Tensors wrap numpy arrays. Primitive operations (see ops.py) record a
backward closure on the active tape; Tape.backward replays them in
reverse. Values are float32 by default; switch to float64 for gradient
checking with set_default_dtype / using_dtype.
"""

from __future__ import annotations

import threading
from typing import Optional

import numpy as np

_state = threading.local()


def _tls():
    if not hasattr(_state, "dtype"):
        _state.dtype = np.float32
        _state.tape = None
    return _state


def get_default_dtype():
    return _tls().dtype


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _tls().dtype = dtype.type


class using_dtype:
    """Context manager that temporarily switches the default float width."""

    def __init__(self, dtype):
        self._dtype = dtype
        self._saved = None

    def __enter__(self):
        self._saved = get_default_dtype()
        set_default_dtype(self._dtype)
        return self

    def __exit__(self, *exc):
        set_default_dtype(self._saved)
        return False


class Tensor:
    """A dense array plus (optionally) a gradient accumulated by the tape."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or get_default_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def astype(self, dtype) -> "Tensor":
        t = Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, dtype=dtype)
        return t

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of primitive applications.

    Each record is a backward closure; backward() visits every record
    exactly once, in reverse order of recording.
    """

    def __init__(self):
        self._records = []
        self._used = False

    def __len__(self):
        return len(self._records)

    def record(self, backward_fn) -> None:
        self._records.append(backward_fn)

    def __enter__(self):
        tls = _tls()
        if tls.tape is not None:
            raise RuntimeError("a tape is already active")
        tls.tape = self
        return self

    def __exit__(self, *exc):
        _tls().tape = None
        return False

    def backward(self, loss: Tensor) -> None:
        if self._used:
            raise RuntimeError("tape already replayed")
        if loss.size != 1:
            raise ValueError("backward expects a scalar loss")
        self._used = True
        loss.accumulate_grad(np.ones_like(loss.data))
        for fn in reversed(self._records):
            fn()


def active_tape() -> Optional[Tape]:
    return _tls().tape


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)
