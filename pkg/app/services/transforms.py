"""
Orthogonal transform kernels.

Hadamard: unnormalized Sylvester-ordered H_N with H_N @ H_N.T = N * I, a fast
butterfly along one axis, and the two-sided 2D transform with its inverse.
DCT: orthonormal DCT-II basis D_N applied as dense matrix products.

2D transforms act on the last two axes, which must be square; any leading
(batch, channel) axes are carried along.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from app.core.errors import ShapeError
from app.schemas.config import is_power_of_two
from app.services.tensor_ops import Tensor, float_dtype

MAX_HADAMARD_SIZE = 4096


@dataclass(frozen=True)
class HadamardPlan:
    """Size of a natural-order Walsh-Hadamard transform."""

    size: int

    def __post_init__(self) -> None:
        if not is_power_of_two(self.size):
            raise ShapeError(f"Hadamard size must be a power of two, got {self.size}")


@dataclass(frozen=True)
class DCTPlan:
    """Size of an orthonormal DCT-II transform."""

    size: int

    def __post_init__(self) -> None:
        if self.size < 1:
            raise ShapeError(f"DCT size must be positive, got {self.size}")

    @property
    def basis(self) -> np.ndarray:
        return dct_matrix(self.size)


@lru_cache(maxsize=None)
def hadamard_matrix(n: int) -> np.ndarray:
    """Sylvester construction: H_1 = [1], H_2n = [[H_n, H_n], [H_n, -H_n]]."""
    HadamardPlan(n)
    if n > MAX_HADAMARD_SIZE:
        raise ShapeError(f"Hadamard size {n} exceeds {MAX_HADAMARD_SIZE}")
    h = np.ones((1, 1), dtype=np.int64)
    while h.shape[0] < n:
        h = np.block([[h, h], [h, -h]])
    h.setflags(write=False)
    return h


def _fwht_last_axis(a: np.ndarray) -> np.ndarray:
    """Butterfly H_N @ v along the last axis of a float64 array."""
    n = a.shape[-1]
    lead = a.shape[:-1]
    h = 1
    while h < n:
        a = a.reshape(*lead, n // (2 * h), 2, h)
        top, bottom = a[..., 0, :], a[..., 1, :]
        a = np.stack((top + bottom, top - bottom), axis=-2)
        h *= 2
    return a.reshape(*lead, n)


def fwht_1d(v: np.ndarray) -> np.ndarray:
    """Unnormalized fast Walsh-Hadamard transform of a vector (or of the last axis)."""
    v = np.asarray(v)
    HadamardPlan(v.shape[-1])
    return _fwht_last_axis(v.astype(np.float64)).astype(float_dtype(v))


def _square_extent(x: np.ndarray) -> int:
    if x.ndim < 2 or x.shape[-1] != x.shape[-2]:
        raise ShapeError(f"2D transforms need square spatial extents, got shape {x.shape}")
    return x.shape[-1]


def _ht2d_unscaled(x: np.ndarray) -> np.ndarray:
    n = _square_extent(x)
    HadamardPlan(n)
    rows = _fwht_last_axis(x.astype(np.float64))
    return _fwht_last_axis(rows.swapaxes(-1, -2)).swapaxes(-1, -2)


def ht2d(x: Tensor) -> Tensor:
    """Per-channel H_N @ X @ H_N."""
    return _ht2d_unscaled(x).astype(float_dtype(x))


def iht2d(z: Tensor) -> Tensor:
    """Per-channel (1 / N^2) H_N @ Z @ H_N."""
    n = _square_extent(z)
    return (_ht2d_unscaled(z) / float(n * n)).astype(float_dtype(z))


@lru_cache(maxsize=None)
def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II basis, row r / column c: a_r cos(pi (2c + 1) r / 2N)."""
    if n < 1:
        raise ShapeError(f"DCT size must be positive, got {n}")
    r = np.arange(n, dtype=np.float64)[:, None]
    c = np.arange(n, dtype=np.float64)[None, :]
    d = np.cos(np.pi * (2.0 * c + 1.0) * r / (2.0 * n))
    d[0, :] *= np.sqrt(1.0 / n)
    d[1:, :] *= np.sqrt(2.0 / n)
    d.setflags(write=False)
    return d


def dct2d(x: Tensor) -> Tensor:
    """Per-channel D_N @ X @ D_N.T."""
    d = dct_matrix(_square_extent(x))
    return (d @ x.astype(np.float64) @ d.T).astype(float_dtype(x))


def idct2d(z: Tensor) -> Tensor:
    """Per-channel D_N.T @ Z @ D_N."""
    d = dct_matrix(_square_extent(z))
    return (d.T @ z.astype(np.float64) @ d).astype(float_dtype(z))
