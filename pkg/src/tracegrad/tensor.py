"""Channel tensors and the 2-D circular shift operator.

Pixels of an ``H x W`` image are flattened row-major everywhere in the
package: pixel ``(row, col)`` lives at flat index ``row * W + col``.  A
shift by ``(dy, dx)`` moves the value at ``(row, col)`` to
``((row + dy) % H, (col + dx) % W)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, DimensionError

DENSE_LIMIT = 4096


@dataclass(frozen=True)
class ImageShape:
    height: int
    width: int

    def __post_init__(self):
        if int(self.height) < 1 or int(self.width) < 1:
            raise DimensionError(f"image shape must be positive, got {self.height}x{self.width}")

    @property
    def n(self) -> int:
        """Number of pixels."""
        return self.height * self.width


@dataclass(frozen=True)
class ShiftOffset:
    dy: int
    dx: int

    def __add__(self, other: ShiftOffset) -> ShiftOffset:
        return ShiftOffset(self.dy + other.dy, self.dx + other.dx)

    def __neg__(self) -> ShiftOffset:
        return ShiftOffset(-self.dy, -self.dx)


def adjoint_offset(off: ShiftOffset) -> ShiftOffset:
    """Offset of the transpose (= inverse) shift."""
    return ShiftOffset(-off.dy, -off.dx)


def circular_shift(x, shape: ImageShape, off: ShiftOffset) -> np.ndarray:
    """Apply ``T_off`` to ``x``.

    ``x`` is a length-N vector, or an array whose first axis has length N
    (each trailing column is shifted independently).
    """
    x = np.asarray(x)
    if x.ndim == 0 or x.shape[0] != shape.n:
        raise DimensionError(f"expected leading length {shape.n}, got shape {x.shape}")
    img = x.reshape((shape.height, shape.width) + x.shape[1:])
    return np.roll(img, (off.dy, off.dx), axis=(0, 1)).reshape(x.shape)


def shift_images(arr: np.ndarray, off: ShiftOffset, axes=(1, 2)) -> np.ndarray:
    """Circularly shift the (height, width) axes of a stacked image array."""
    if off.dy == 0 and off.dx == 0:
        return arr
    return np.roll(arr, (off.dy, off.dx), axis=axes)


def dense_shift_matrix(shape: ImageShape, off: ShiftOffset) -> np.ndarray:
    """Explicit N x N permutation matrix P with ``P @ x == circular_shift(x, ...)``.

    Test oracle only; refuses N above ``DENSE_LIMIT``.
    """
    n = shape.n
    if n > DENSE_LIMIT:
        raise CapacityError(f"dense shift matrix of size {n} exceeds limit {DENSE_LIMIT}")
    rows = np.arange(shape.height)[:, None]
    cols = np.arange(shape.width)[None, :]
    src = (rows * shape.width + cols).ravel()
    dst = (((rows + off.dy) % shape.height) * shape.width + (cols + off.dx) % shape.width).ravel()
    p = np.zeros((n, n))
    p[dst, src] = 1.0
    return p


@dataclass(frozen=True, eq=False)
class ChannelTensor:
    """A batch of multi-channel images stored as a ``(C, N, B)`` array."""

    shape: ImageShape
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3 or v.shape[1] != self.shape.n:
            raise DimensionError(
                f"values must have shape (C, {self.shape.n}, B), got {v.shape}")
        if v.shape[0] < 1 or v.shape[2] < 1:
            raise DimensionError("channel and batch counts must be positive")
        if not np.all(np.isfinite(v)):
            raise ValueError("ChannelTensor values must be finite")
        v = v.view()
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def batch(self) -> int:
        return self.values.shape[2]

    @property
    def images(self) -> np.ndarray:
        """``(C, H, W, B)`` view of the values."""
        return self.values.reshape(self.channels, self.shape.height, self.shape.width, self.batch)

    @classmethod
    def from_images(cls, arr) -> ChannelTensor:
        arr = np.asarray(arr)
        if arr.ndim != 4:
            raise DimensionError(f"expected (C, H, W, B) array, got shape {arr.shape}")
        c, h, w, b = arr.shape
        return cls(ImageShape(h, w), arr.reshape(c, h * w, b))

    @classmethod
    def random(cls, shape: ImageShape, channels: int, batch: int, rng=None, dtype=np.float64):
        rng = np.random.default_rng(rng)
        return cls(shape, rng.standard_normal((channels, shape.n, batch)).astype(dtype))
