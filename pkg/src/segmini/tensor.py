"""Dense rank-4 tensors in (n, c, h, w) row-major order.

Tensors are plain C-contiguous numpy arrays. Storage is float32; the
gradient-check path passes float64 arrays through the same ops, which
preserve the input dtype.
"""
from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np

from .errors import NumericError, ShapeError, SizeError

DTYPE = np.float32
_INDEX_MAX = np.iinfo(np.intp).max


class Shape(NamedTuple):
    n: int
    c: int
    h: int
    w: int

    @property
    def size(self) -> int:
        return self.n * self.c * self.h * self.w


def as_shape(shape: Sequence[int]) -> Shape:
    if len(shape) != 4:
        raise ShapeError(f"expected 4 dimensions (n, c, h, w), got {len(shape)}")
    dims = []
    for d in shape:
        if int(d) != d or d < 1:
            raise ShapeError(f"dimensions must be positive integers, got {tuple(shape)}")
        dims.append(int(d))
    s = Shape(*dims)
    if s.size > _INDEX_MAX:
        raise SizeError(f"element count of {tuple(s)} overflows the native index type")
    return s


def zeros(shape: Sequence[int], dtype=DTYPE) -> np.ndarray:
    return np.zeros(as_shape(shape), dtype=dtype)


def from_values(shape: Sequence[int], values, dtype=DTYPE) -> np.ndarray:
    s = as_shape(shape)
    flat = np.asarray(values, dtype=dtype).ravel()
    if flat.size != s.size:
        raise ShapeError(f"{flat.size} values cannot fill shape {tuple(s)} ({s.size} elements)")
    return flat.reshape(s).copy()


def flatten(t: np.ndarray) -> list[float]:
    return np.ascontiguousarray(t).ravel().tolist()


def flat_index(shape: Sequence[int], n: int, c: int, h: int, w: int) -> int:
    _, C, H, W = shape
    return ((n * C + c) * H + h) * W + w


def approx_eq(a: np.ndarray, b: np.ndarray, tol: float) -> bool:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        return False
    if a.size == 0:
        return True
    diff = np.abs(a.astype(np.float64) - b.astype(np.float64))
    return bool(np.max(diff) <= tol)


def check_tensor(t: np.ndarray, name: str = "tensor") -> np.ndarray:
    """Validate rank and return a C-contiguous floating array."""
    t = np.asarray(t)
    if t.ndim != 4:
        raise ShapeError(f"{name} must be rank 4 (n, c, h, w), got shape {t.shape}")
    if t.dtype not in (np.float32, np.float64):
        t = t.astype(DTYPE)
    return np.ascontiguousarray(t)


def ensure_finite(t: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(t).all():
        raise NumericError(f"{op} produced non-finite values")
    return t
