"""Dense row-major tensors, the unit of all computation and communication.

Only two element types exist: f32 and f64. f64 is the default everywhere so
that the correctness oracles (sync-equivalence, collective folds) stay tight;
f32 is available for throughput benchmarks.
"""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .errors import ShapeError

F32 = "f32"
F64 = "f64"

NP_DTYPES = {F32: np.dtype(np.float32), F64: np.dtype(np.float64)}
DTYPE_CODES = {F32: 0, F64: 1}
CODE_DTYPES = {code: name for name, code in DTYPE_CODES.items()}


def dtype_of(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return F32
    if arr.dtype == np.float64:
        return F64
    raise ShapeError(f"unsupported element type {arr.dtype}; only f32/f64 tensors exist")


class Tensor:
    """Immutable dense array with shape, dtype in {f32, f64}, row-major data.

    Rank 0 means a scalar with exactly one element. Arrays handed in are
    copied into a C-contiguous read-only buffer, so a Tensor can be shared
    across execution contexts without torn reads.
    """

    __slots__ = ("_np",)

    def __init__(self, data, dtype: str | None = None):
        if dtype is not None and dtype not in NP_DTYPES:
            raise ShapeError(f"unknown dtype {dtype!r}; expected one of {sorted(NP_DTYPES)}")
        arr = np.array(data, dtype=NP_DTYPES[dtype] if dtype else None, copy=True)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        self._np = arr

    @staticmethod
    def wrap(arr: np.ndarray) -> "Tensor":
        """Wrap an ndarray without copying when it is already safe to share."""
        if arr.dtype not in (np.float32, np.float64):
            return Tensor(arr)
        if not arr.flags.c_contiguous or arr.flags.writeable:
            arr = np.ascontiguousarray(arr).copy() if not arr.flags.c_contiguous else arr.copy()
            arr.setflags(write=False)
        t = object.__new__(Tensor)
        t._np = arr
        return t

    @property
    def np(self) -> np.ndarray:
        """Read-only ndarray view of the data."""
        return self._np

    @property
    def shape(self) -> tuple[int, ...]:
        return self._np.shape

    @property
    def dtype(self) -> str:
        return dtype_of(self._np)

    @property
    def size(self) -> int:
        return self._np.size

    def item(self) -> float:
        return float(self._np.item())

    def tolist(self):
        return self._np.tolist()

    def tobytes(self) -> bytes:
        return self._np.tobytes()

    def equals_bitwise(self, other: "Tensor") -> bool:
        return (
            self.dtype == other.dtype
            and self.shape == other.shape
            and self.tobytes() == other.tobytes()
        )

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"


def tensor(data, dtype: str = F64) -> Tensor:
    """Build a Tensor, defaulting to f64."""
    return Tensor(data, dtype=dtype)


def zeros(shape: Iterable[int], dtype: str = F64) -> Tensor:
    return Tensor.wrap(np.zeros(tuple(shape), dtype=NP_DTYPES[dtype]))


def checksum(arrays: Iterable[np.ndarray]) -> str:
    """Order-sensitive hex digest of raw tensor bytes; used to compare replica state."""
    import hashlib

    h = hashlib.md5()
    for arr in arrays:
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
