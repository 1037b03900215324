"""Dense 2-D matrices of 64-bit floats, immutable after construction."""

from __future__ import annotations

import hashlib

import numpy as np


class NumericsError(Exception):
    """Base class for numeric-substrate failures."""


class ShapeError(NumericsError):
    """Operand shapes do not conform."""


class NonFiniteError(NumericsError):
    """A value became NaN or infinite."""


class Matrix:
    """An immutable rows x cols array of float64, stored row-major.

    Every public operation checks that the result is finite, so a NaN or
    overflow surfaces at the op that produced it instead of propagating.
    The wrapped buffer is write-protected; share Matrix values freely
    across threads.
    """

    __slots__ = ("_a",)

    def __init__(self, data) -> None:
        a = np.array(data, dtype=np.float64, order="C")
        if a.ndim == 1:
            a = a.reshape(1, -1)
        if a.ndim != 2 or a.size == 0:
            raise ShapeError(f"Matrix requires a nonempty 2-D array, got shape {a.shape}")
        if not np.isfinite(a).all():
            raise NonFiniteError("matrix contains NaN or Inf")
        a.setflags(write=False)
        self._a = a

    @classmethod
    def _wrap(cls, a: np.ndarray) -> "Matrix":
        # internal fast path: a must already be float64, C-contiguous, owned
        m = object.__new__(cls)
        if not np.isfinite(a).all():
            raise NonFiniteError("matrix contains NaN or Inf")
        a.setflags(write=False)
        m._a = a
        return m

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "Matrix":
        return cls._wrap(np.zeros((rows, cols)))

    @classmethod
    def identity(cls, n: int) -> "Matrix":
        return cls._wrap(np.eye(n))

    @property
    def rows(self) -> int:
        return self._a.shape[0]

    @property
    def cols(self) -> int:
        return self._a.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self._a.shape

    @property
    def array(self) -> np.ndarray:
        """Read-only view of the underlying float64 buffer."""
        return self._a

    def item(self) -> float:
        if self._a.shape != (1, 1):
            raise ShapeError(f"item() requires a 1x1 matrix, got {self.shape}")
        return float(self._a[0, 0])

    def column(self, j: int) -> "Matrix":
        return Matrix._wrap(self._a[:, j : j + 1].copy())

    def tobytes(self) -> bytes:
        """Raw little-endian float64 bytes, row-major."""
        return self._a.astype("<f8", copy=False).tobytes(order="C")

    def checksum(self) -> str:
        return hashlib.sha256(self.tobytes()).hexdigest()

    def allclose(self, other: "Matrix", rtol: float = 1e-12, atol: float = 1e-12) -> bool:
        return self.shape == other.shape and np.allclose(
            self._a, other._a, rtol=rtol, atol=atol
        )

    def __repr__(self) -> str:
        return f"Matrix({self.rows}x{self.cols})"


def same_bits(a: Matrix, b: Matrix) -> bool:
    """Bitwise equality of two matrices (shape and every float's bits)."""
    return a.shape == b.shape and a.tobytes() == b.tobytes()
