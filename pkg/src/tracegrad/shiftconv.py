"""Convolution as a weighted sum of circular shifts, with exact gradients.

A multi-channel layer computes

    Y[m] = sum_n sum_i w[m, n, i] * T_{k(i)} X[n]

where ``T_k`` is the circular shift of :mod:`tracegrad.tensor` and ``k(i)``
enumerates the K x K window (``dy`` outer, ``dx`` inner, both ascending).
Weight arrays are laid out ``(c_out, c_in, K*K)``.

The weight gradient of a scalar loss is ``<T_{k(i)} X[n], dY[m]>``.  In
trace form this is ``tr(X[n] dY[m]^T T_{k(i)})``, equivalently
``tr(dY[m] X[n]^T T_{-k(i)})``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError
from .tensor import ChannelTensor, ShiftOffset, shift_images


@dataclass(frozen=True)
class KernelOffsetMap:
    """Bijection between weight index ``i`` and its shift offset ``k(i)``."""

    k: int
    offsets: tuple = field(init=False)

    def __post_init__(self):
        if self.k < 1 or self.k % 2 == 0:
            raise DimensionError(f"kernel size must be odd and positive, got {self.k}")
        h = self.k // 2
        offs = tuple(ShiftOffset(dy, dx) for dy in range(-h, h + 1) for dx in range(-h, h + 1))
        object.__setattr__(self, "offsets", offs)

    @property
    def n_w(self) -> int:
        return self.k * self.k

    def index_of(self, off: ShiftOffset) -> int:
        h = self.k // 2
        if abs(off.dy) > h or abs(off.dx) > h:
            raise KeyError(off)
        return (off.dy + h) * self.k + (off.dx + h)


@dataclass(frozen=True, eq=False)
class ConvWeights:
    offset_map: KernelOffsetMap
    w: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w)
        if w.ndim != 3 or w.shape[2] != self.offset_map.n_w:
            raise DimensionError(
                f"weights must have shape (c_out, c_in, {self.offset_map.n_w}), got {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        object.__setattr__(self, "w", w)

    @property
    def c_out(self) -> int:
        return self.w.shape[0]

    @property
    def c_in(self) -> int:
        return self.w.shape[1]

    @classmethod
    def random(cls, k, c_in, c_out, rng=None):
        rng = np.random.default_rng(rng)
        om = KernelOffsetMap(k)
        return cls(om, rng.standard_normal((c_out, c_in, om.n_w)))


# -- array-level kernels on (C, H, W, B) images ---------------------------------

def shifted_stack(x: np.ndarray, offsets) -> np.ndarray:
    """``(C, n_w, H, W, B)`` array holding ``T_{k(i)} x[c]`` at ``[c, i]``."""
    return np.stack([shift_images(x, off) for off in offsets], axis=1)


def conv_forward_array(x: np.ndarray, w: np.ndarray, offsets) -> np.ndarray:
    c_in, h, wd, b = x.shape
    c_out = w.shape[0]
    cols = shifted_stack(x, offsets).reshape(c_in * len(offsets), h * wd * b)
    y = w.reshape(c_out, -1) @ cols
    return y.reshape(c_out, h, wd, b)


def grad_weights_array(x: np.ndarray, dy: np.ndarray, offsets) -> np.ndarray:
    c_in, h, wd, b = x.shape
    c_out = dy.shape[0]
    cols = shifted_stack(x, offsets).reshape(c_in * len(offsets), h * wd * b)
    g = dy.reshape(c_out, -1) @ cols.T
    return g.reshape(c_out, c_in, len(offsets))


def grad_input_array(dy: np.ndarray, w: np.ndarray, offsets) -> np.ndarray:
    c_out, h, wd, b = dy.shape
    per_offset = np.einsum("mni,mp->inp", w, dy.reshape(c_out, -1))
    per_offset = per_offset.reshape(len(offsets), w.shape[1], h, wd, b)
    out = np.zeros_like(per_offset[0])
    for u, off in zip(per_offset, offsets):
        out += shift_images(u, -off)
    return out


# -- ChannelTensor API -----------------------------------------------------------

def _check_input(x: ChannelTensor, c_in: int):
    if x.channels != c_in:
        raise DimensionError(f"input has {x.channels} channels, weights expect {c_in}")


def conv_forward(x: ChannelTensor, w: ConvWeights) -> ChannelTensor:
    _check_input(x, w.c_in)
    y = conv_forward_array(x.images, w.w, w.offset_map.offsets)
    return ChannelTensor.from_images(y)


def grad_weights_exact(x: ChannelTensor, dy: ChannelTensor, offset_map: KernelOffsetMap) -> np.ndarray:
    """Exact weight gradient ``(c_out, c_in, n_w)`` via shift-and-dot."""
    if x.shape != dy.shape or x.batch != dy.batch:
        raise DimensionError("input and output gradient must share image shape and batch")
    return grad_weights_array(x.images, dy.images, offset_map.offsets)


def grad_input_exact(dy: ChannelTensor, w: ConvWeights) -> ChannelTensor:
    """Adjoint of :func:`conv_forward` with respect to its input."""
    if dy.channels != w.c_out:
        raise DimensionError(f"output gradient has {dy.channels} channels, weights expect {w.c_out}")
    return ChannelTensor.from_images(grad_input_array(dy.images, w.w, w.offset_map.offsets))
