"""Dense float tensors and a seeded random stream.

Tensors are plain ``numpy.ndarray`` values (float32 by default, float64 in the
gradient-check shadow mode).  The helpers here add the strictness the rest of
the package relies on: no implicit broadcasting, and 64-bit accumulation for
reductions so finite-difference checks stay meaningful.
"""
from __future__ import annotations

import hashlib
from typing import Sequence

import numpy as np

DTYPE = np.float32

Shape = Sequence[int]


class ShapeError(ValueError):
    pass


def _check_extents(shape: Shape) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeError(f"extents must be >= 1, got {shape}")
    return shape


def zeros(shape: Shape, dtype=DTYPE) -> np.ndarray:
    return np.zeros(_check_extents(shape), dtype=dtype)


def ones(shape: Shape, dtype=DTYPE) -> np.ndarray:
    return np.ones(_check_extents(shape), dtype=dtype)


def full(shape: Shape, value: float, dtype=DTYPE) -> np.ndarray:
    return np.full(_check_extents(shape), value, dtype=dtype)


def same_shape(a: np.ndarray, b: np.ndarray, op: str = "op") -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    same_shape(a, b, "add")
    return a + b


def sub(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    same_shape(a, b, "sub")
    return a - b


def mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    same_shape(a, b, "mul")
    return a * b


def scale(a: np.ndarray, s: float) -> np.ndarray:
    return (a * s).astype(a.dtype, copy=False)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b


def dot(a: np.ndarray, b: np.ndarray) -> float:
    if a.size != b.size:
        raise ShapeError(f"dot: {a.size} vs {b.size} elements")
    return float(np.dot(a.ravel().astype(np.float64), b.ravel().astype(np.float64)))


def norm2(a: np.ndarray) -> float:
    return float(np.sqrt(dot(a, a)))


def sum(a: np.ndarray, axis=None, keepdims: bool = False) -> np.ndarray:  # noqa: A001
    return np.sum(a, axis=axis, dtype=np.float64, keepdims=keepdims).astype(a.dtype)


def mean(a: np.ndarray, axis=None, keepdims: bool = False) -> np.ndarray:
    return np.mean(a, axis=axis, dtype=np.float64, keepdims=keepdims).astype(a.dtype)


class Rng:
    """Seeded stream backed by numpy's PCG64 bit generator.

    PCG64 output is defined bit-for-bit independently of platform.  Child
    streams are derived with ``spawn(*keys)``: the child seed material is
    ``SeedSequence([seed, *keys])``, so a worker's stream depends only on the
    root seed and its key path, never on draw order elsewhere.
    """

    def __init__(self, seed: int, _path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = _path
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, *_path])))

    def spawn(self, *keys: int | str) -> "Rng":
        return Rng(self.seed, self.path + tuple(_key_int(k) for k in keys))

    def normal(self, shape: Shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        if std < 0:
            raise ValueError("std must be >= 0")
        return self._gen.normal(mean, std, size=tuple(shape)).astype(DTYPE)

    def uniform(self, shape: Shape, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        if lo > hi:
            raise ValueError("lo must be <= hi")
        return self._gen.uniform(lo, hi, size=tuple(shape)).astype(DTYPE)

    def uniform64(self, size, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        return self._gen.uniform(lo, hi, size=size)

    def integers(self, lo: int, hi: int, size=None):
        return self._gen.integers(lo, hi, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def _key_int(key: int | str) -> int:
    if isinstance(key, str):
        # stable across processes, unlike hash()
        return int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:8], "little")
    return int(key)


def rng_normal(rng: Rng, shape: Shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    return rng.normal(shape, mean, std)


def rng_uniform(rng: Rng, shape: Shape, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    return rng.uniform(shape, lo, hi)
