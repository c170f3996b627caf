"""Correctness suites for conv weight gradients.

* :func:`monte_carlo_unbiasedness` averages probed gradients over many seeds
  and reports per-coefficient z-scores against the exact gradient.
* :func:`finite_difference_check` compares the exact gradient of
  ``L(w) = <conv(x, w), dy>`` with central differences.
* :func:`dense_trace_gradient` builds the gradient from explicit shift
  matrices as ``tr(X[n] dY[m]^T P(k(i)))``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, DomainError
from .lowmem import MODES, compress_array, draw_probes, probed_grad_array
from .probing import BlockSparsity, ProbeSeed
from .shiftconv import KernelOffsetMap, conv_forward_array, grad_weights_array
from .tensor import DENSE_LIMIT, ImageShape, dense_shift_matrix


@dataclass(frozen=True)
class ConvInstance:
    """Random conv problem: input ``x (C_in, H, W, B)``, residual ``dy (C_out, H, W, B)``, weights."""

    x: np.ndarray
    dy: np.ndarray
    w: np.ndarray
    offset_map: KernelOffsetMap

    @property
    def shape(self) -> ImageShape:
        return ImageShape(self.x.shape[1], self.x.shape[2])

    @property
    def exact(self) -> np.ndarray:
        return grad_weights_array(self.x, self.dy, self.offset_map.offsets)


def random_instance(height=8, width=8, c_in=2, c_out=2, k=3, batch=4, seed=0) -> ConvInstance:
    rng = np.random.default_rng(seed)
    om = KernelOffsetMap(k)
    return ConvInstance(rng.standard_normal((c_in, height, width, batch)),
                        rng.standard_normal((c_out, height, width, batch)),
                        rng.standard_normal((c_out, c_in, om.n_w)), om)


def probed_gradient(inst: ConvInstance, mode: str, r: int, seed: ProbeSeed,
                    sparsity: BlockSparsity | None = None) -> np.ndarray:
    c_in, h, w, b = inst.x.shape
    c_out = inst.dy.shape[0]
    n = h * w
    probes = draw_probes(mode, n, c_in, c_out, r, seed, sparsity)
    xbar = compress_array(inst.x.reshape(c_in, n, b), probes)
    return probed_grad_array(xbar, probes, inst.dy.reshape(c_out, n, b), inst.shape,
                             inst.offset_map.offsets)


@dataclass(frozen=True)
class UnbiasednessResult:
    mode: str
    mean: np.ndarray
    se: np.ndarray
    exact: np.ndarray
    trials: int

    @property
    def z(self) -> np.ndarray:
        return (self.mean - self.exact) / self.se

    @property
    def max_abs_z(self) -> float:
        return float(np.max(np.abs(self.z)))

    def passes(self, limit: float = 4.0) -> bool:
        return self.max_abs_z <= limit


def monte_carlo_unbiasedness(inst: ConvInstance, mode: str, r: int, trials: int, seed: int,
                             sparsity: BlockSparsity | None = None) -> UnbiasednessResult:
    """Mean and standard error of the probed gradient over ``trials`` seeds."""
    if mode not in MODES:
        raise DomainError(f"unknown probing mode {mode!r}")
    if trials < 2:
        raise DomainError(f"need at least 2 trials, got {trials}")
    total = np.zeros_like(inst.exact)
    total_sq = np.zeros_like(total)
    for t in range(trials):
        g = probed_gradient(inst, mode, r, ProbeSeed(seed, t), sparsity)
        total += g
        total_sq += g * g
    mean = total / trials
    var = np.maximum(total_sq / trials - mean * mean, 0.0) * trials / (trials - 1)
    return UnbiasednessResult(mode, mean, np.sqrt(var / trials), inst.exact, trials)


def finite_difference_gradient(inst: ConvInstance, h: float = 1e-6) -> np.ndarray:
    offsets = inst.offset_map.offsets

    def loss(w):
        return float(np.sum(conv_forward_array(inst.x, w, offsets) * inst.dy))

    g = np.empty_like(inst.w)
    w = inst.w.copy()
    for idx in np.ndindex(*w.shape):
        keep = w[idx]
        w[idx] = keep + h
        up = loss(w)
        w[idx] = keep - h
        down = loss(w)
        w[idx] = keep
        g[idx] = (up - down) / (2 * h)
    return g


def relative_error(a, b) -> float:
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), np.finfo(float).tiny))


def finite_difference_check(inst: ConvInstance, h: float = 1e-6) -> float:
    """Max relative deviation of the exact gradient from central differences."""
    return relative_error(inst.exact, finite_difference_gradient(inst, h))


def dense_trace_gradient(inst: ConvInstance) -> np.ndarray:
    shape = inst.shape
    if shape.n > DENSE_LIMIT:
        raise CapacityError(f"N = {shape.n} exceeds dense limit {DENSE_LIMIT}")
    c_in, b = inst.x.shape[0], inst.x.shape[3]
    c_out = inst.dy.shape[0]
    xs = inst.x.reshape(c_in, shape.n, b)
    dys = inst.dy.reshape(c_out, shape.n, b)
    mats = [dense_shift_matrix(shape, off) for off in inst.offset_map.offsets]
    g = np.empty((c_out, c_in, len(mats)))
    for m in range(c_out):
        for n in range(c_in):
            outer = xs[n] @ dys[m].T
            for i, p in enumerate(mats):
                g[m, n, i] = np.trace(outer @ p)
    return g
