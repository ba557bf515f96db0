"""Dense float64 arrays, keyed random streams and elementwise helpers.

Tensors are plain ``numpy.ndarray`` values of dtype float64. Every helper
here returns a fresh array and never writes into its arguments.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

_U64 = (1 << 64) - 1


def as_tensor(values, shape: Sequence[int] | None = None) -> np.ndarray:
    """Copy ``values`` into a finite float64 array, optionally reshaped."""
    arr = np.array(values, dtype=np.float64)
    if shape is not None:
        dims = tuple(int(d) for d in shape)
        if any(d <= 0 for d in dims):
            raise ValueError(f"shape must have positive dims, got {dims}")
        if int(np.prod(dims)) != arr.size:
            raise ValueError(f"cannot view {arr.size} values as shape {dims}")
        arr = arr.reshape(dims)
    check_finite(arr)
    return arr


def check_finite(t: np.ndarray, what: str = "tensor") -> None:
    if not np.all(np.isfinite(t)):
        raise FloatingPointError(f"{what} contains NaN or Inf")


def stream_id(*keys: int | str) -> int:
    """Hash an ordered key tuple (e.g. purpose, round, client) to a 64-bit id."""
    h = hashlib.blake2b(digest_size=8)
    for k in keys:
        if isinstance(k, str):
            h.update(b"s" + k.encode("utf-8") + b"\0")
        else:
            h.update(b"i" + int(k).to_bytes(16, "little", signed=True))
    return int.from_bytes(h.digest(), "little")


@dataclass(frozen=True)
class Rng:
    """A replayable random stream identified by ``(seed, stream)``.

    Backed by the counter-based Philox generator keyed with both words, so two
    ``Rng`` values with equal fields yield identical draws on any platform and
    in any execution order. Use :meth:`child` to derive independent substreams
    (per round, per client) without sharing state.
    """

    seed: int
    stream: int = 0

    def __post_init__(self):
        if not (0 <= self.seed <= _U64 and 0 <= self.stream <= _U64):
            raise ValueError("seed and stream must be unsigned 64-bit integers")

    def generator(self) -> np.random.Generator:
        """A fresh numpy Generator positioned at the start of this stream."""
        return np.random.Generator(np.random.Philox(key=[self.seed, self.stream]))

    def child(self, *keys: int | str) -> "Rng":
        return Rng(self.seed, stream_id(self.stream, *keys))


def gaussian_sample(rng: Rng | np.random.Generator, shape, std: float) -> np.ndarray:
    """Draw i.i.d. N(0, std^2) entries of the given shape."""
    if not std >= 0:
        raise ValueError(f"std must be non-negative, got {std}")
    shape = (int(shape),) if np.isscalar(shape) else tuple(int(d) for d in shape)
    if std == 0:
        return np.zeros(shape, dtype=np.float64)
    gen = rng.generator() if isinstance(rng, Rng) else rng
    return gen.standard_normal(shape) * float(std)


def l2_norm(t: np.ndarray) -> float:
    return float(np.sqrt(np.sum(np.square(t, dtype=np.float64))))


def _same_shape(x: np.ndarray, y: np.ndarray) -> None:
    if np.shape(x) != np.shape(y):
        raise ValueError(f"shape mismatch: {np.shape(x)} vs {np.shape(y)}")


def axpy(a: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Return ``a * x + y``."""
    _same_shape(x, y)
    return a * np.asarray(x, dtype=np.float64) + np.asarray(y, dtype=np.float64)


def hadamard(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    _same_shape(x, y)
    return np.asarray(x, dtype=np.float64) * np.asarray(y, dtype=np.float64)


def scale(x: np.ndarray, a: float) -> np.ndarray:
    return np.asarray(x, dtype=np.float64) * float(a)
