"""Variables as named resources: (name, device) uniquely identifies storage.

Two declarations with an identical (name, device) pair alias the same storage,
which is how between-graph workers share state and how mirrored replicas keep
one instance per device. Values are swapped whole-tensor, so concurrent
readers never observe a torn write.
"""

from __future__ import annotations

import threading
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import VariableError
from .tensor import F64, NP_DTYPES, Tensor


@dataclass(frozen=True)
class Initializer:
    """Named init rule with an explicit seed so replicas initialize identically."""

    kind: str  # zeros | constant | uniform
    arg: float = 0.0  # constant value, or half-width s for uniform(-s, s)
    seed: int = 0

    def build(self, shape: tuple[int, ...], dtype: str) -> np.ndarray:
        np_dtype = NP_DTYPES[dtype]
        if self.kind == "zeros":
            return np.zeros(shape, dtype=np_dtype)
        if self.kind == "constant":
            return np.full(shape, self.arg, dtype=np_dtype)
        if self.kind == "uniform":
            rng = np.random.default_rng(self.seed)
            return rng.uniform(-self.arg, self.arg, size=shape).astype(np_dtype)
        raise VariableError(f"unknown initializer kind {self.kind!r}")


def zeros_init() -> Initializer:
    return Initializer("zeros")


def constant_init(c: float) -> Initializer:
    return Initializer("constant", arg=c)


def uniform_init(span: float, seed: int) -> Initializer:
    return Initializer("uniform", arg=span, seed=seed)


def derive_seed(base_seed: int, name: str) -> int:
    """Stable per-name seed so the same variable initializes identically everywhere."""
    return (base_seed * 1000003 + zlib.crc32(name.encode("utf-8"))) % (2**31 - 1)


class VariableResource:
    """Storage slot for one named variable on one device."""

    def __init__(self, name: str, device: str, shape: tuple[int, ...], dtype: str,
                 initializer: Initializer):
        self.name = name
        self.device = device
        self.shape = tuple(shape)
        self.dtype = dtype
        self.initializer = initializer
        value = initializer.build(self.shape, dtype)
        value.setflags(write=False)
        self._value = value

    def read(self) -> np.ndarray:
        # Attribute load is atomic; the array itself is immutable.
        return self._value

    def assign(self, value: np.ndarray) -> None:
        arr = np.asarray(value, dtype=NP_DTYPES[self.dtype])
        if arr.shape != self.shape:
            raise VariableError(
                f"assign to {self.name!r}: shape {arr.shape} != variable shape {self.shape}")
        arr = np.ascontiguousarray(arr).copy()
        arr.setflags(write=False)
        self._value = arr

    def read_tensor(self) -> Tensor:
        return Tensor.wrap(self._value)

    def __repr__(self) -> str:
        return f"VariableResource({self.name!r}, device={self.device!r}, shape={self.shape})"


DEFAULT_DEVICE = "/job:local/task:0/device:0"


class VariableStore:
    """Process-local name resolution: (name, device) -> storage.

    The store stays writable after graph finalize; asynchronous serving reads
    and writes variables long after construction ends.
    """

    def __init__(self):
        self._by_key: dict[tuple[str, str], VariableResource] = {}
        self._lock = threading.Lock()

    def get_or_create(self, name: str, shape, dtype: str = F64,
                      initializer: Initializer | None = None,
                      device: str = DEFAULT_DEVICE) -> VariableResource:
        shape = tuple(int(d) for d in shape)
        initializer = initializer or zeros_init()
        key = (name, device)
        with self._lock:
            existing = self._by_key.get(key)
            if existing is not None:
                if existing.shape != shape:
                    raise VariableError(
                        f"variable {name!r} on {device!r} exists with shape "
                        f"{existing.shape}, requested {shape}")
                return existing
            resource = VariableResource(name, device, shape, dtype, initializer)
            self._by_key[key] = resource
            return resource

    def lookup(self, name: str, device: str) -> VariableResource | None:
        return self._by_key.get((name, device))

    def all_resources(self) -> list[VariableResource]:
        with self._lock:
            return list(self._by_key.values())

    def on_device(self, device: str) -> list[VariableResource]:
        with self._lock:
            return [r for (n, d), r in self._by_key.items() if d == device]
