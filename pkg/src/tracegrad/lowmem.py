"""Convolution layer whose backward pass only needs a probed sketch of its input.

Forward: compute the exact output, draw probes ``Z`` from a fresh seed and
keep ``Xbar = Z^T X`` (``r x B``) together with the seed.  Backward:
regenerate ``Z`` from the seed and estimate every weight gradient

    dw[m, n, i] ~ (1 / nnz(n)) * sum_j (T_{k(i)} z[n, j])^T dY[m] Xbar[j]^T

which is an unbiased estimate of ``tr(dY[m] X[n]^T T_{-k(i)})``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContextError, DimensionError, DomainError
from .probing import (BlockSparsity, ProbeMatrix, ProbeSeed, gen_block_sparse,
                      gen_gaussian, gen_pairwise, identity_probe)
from .shiftconv import ConvWeights, conv_forward, grad_input_exact
from .tensor import ChannelTensor, ImageShape, shift_images

MODES = ("multi", "ortho", "indep")


@dataclass(frozen=True, eq=False)
class LowMemConvConfig:
    """Probing setup of one layer.

    ``mode`` is ``multi`` (dense stacked Gaussian probes), ``ortho``
    (block-sparse probes, ``sparsity`` defaults to ``1 / c_in``), ``indep``
    (separate ``r`` probes per channel pair) or ``identity`` (lossless
    ``Z = I`` test hook; requires ``r = N * c_in``).
    """

    r: int
    weights: ConvWeights
    mode: str = "ortho"
    sparsity: BlockSparsity | None = None

    def __post_init__(self):
        if self.r < 1:
            raise DomainError(f"r must be at least 1, got {self.r}")
        if self.mode not in MODES + ("identity",):
            raise ValueError(f"unknown probing mode {self.mode!r}")
        if self.mode == "ortho" and self.sparsity is None:
            object.__setattr__(self, "sparsity", BlockSparsity.uniform(self.weights.c_in))
        if self.sparsity is not None and len(self.sparsity.probs) != self.weights.c_in:
            raise DimensionError("sparsity must give one probability per input channel")

    def meta(self, shape: ImageShape) -> tuple:
        probs = self.sparsity.probs if self.mode == "ortho" else None
        return (shape, self.weights.c_in, self.weights.c_out, self.r, self.mode, probs)


@dataclass(frozen=True, eq=False)
class CompressedActivation:
    """Everything the backward pass keeps about the layer input."""

    xbar: np.ndarray
    seed: ProbeSeed
    meta: tuple

    @property
    def stored_scalars(self) -> int:
        return int(self.xbar.size)


def draw_probes(mode: str, n: int, c_in: int, c_out: int, r: int, seed: ProbeSeed,
                sparsity: BlockSparsity | None = None):
    """Probe set for ``mode``: a :class:`ProbeMatrix`, or a pairwise array for ``indep``."""
    if mode == "multi":
        return gen_gaussian(n, c_in, r, seed)
    if mode == "ortho":
        return gen_block_sparse(n, c_in, r, sparsity or BlockSparsity.uniform(c_in), seed)
    if mode == "indep":
        return gen_pairwise(n, c_in, c_out, r, seed)
    if mode == "identity":
        if r != n * c_in:
            raise DimensionError(f"identity probe needs r = {n * c_in}, got {r}")
        return identity_probe(n, c_in)
    raise ValueError(f"unknown probing mode {mode!r}")


def compress_array(x: np.ndarray, probes) -> np.ndarray:
    """Sketch a ``(C, N, B)`` input: ``(r, B)``, or ``(c_out, c_in, r, B)`` for pairwise probes."""
    c_in, n, b = x.shape
    if isinstance(probes, ProbeMatrix):
        return probes.matrix.T @ x.reshape(c_in * n, b)
    return np.einsum("mnpj,npb->mnjb", probes, x)


def probed_grad_array(xbar: np.ndarray, probes, dy: np.ndarray, shape: ImageShape,
                      offsets) -> np.ndarray:
    """Weight-gradient estimate ``(c_out, c_in, n_w)`` from a sketch and ``(C_out, N, B)`` residual."""
    c_out, n, b = dy.shape
    h, w = shape.height, shape.width
    if isinstance(probes, ProbeMatrix):
        c_in, r = probes.c_in, probes.r
        blocks = probes.blocks.reshape(c_in, h, w, r)
        shifted = np.stack([shift_images(blocks, off) for off in offsets], axis=1)
        lt = (dy.reshape(c_out * n, b) @ xbar.T).reshape(c_out, n * r)
        g = lt @ shifted.reshape(c_in * len(offsets), n * r).T
        g = g.reshape(c_out, c_in, len(offsets))
        return g / probes.normalizer[None, :, None]
    c_in, r = probes.shape[1], probes.shape[3]
    q = np.einsum("mpb,mnjb->mnpj", dy, xbar)
    blocks = probes.reshape(c_out, c_in, h, w, r)
    g = np.empty((c_out, c_in, len(offsets)))
    for i, off in enumerate(offsets):
        zs = shift_images(blocks, off, axes=(2, 3)).reshape(c_out, c_in, n, r)
        g[:, :, i] = np.einsum("mnpj,mnpj->mn", zs, q)
    return g / r


def forward_compressed(x: ChannelTensor, cfg: LowMemConvConfig, iter_seed: ProbeSeed):
    """Exact forward output plus the compressed context for the backward pass."""
    y = conv_forward(x, cfg.weights)
    probes = draw_probes(cfg.mode, x.shape.n, cfg.weights.c_in, cfg.weights.c_out, cfg.r,
                         iter_seed, cfg.sparsity)
    xbar = compress_array(x.values, probes)
    return y, CompressedActivation(xbar, iter_seed, cfg.meta(x.shape))


def backward_weights(ctx: CompressedActivation, dy: ChannelTensor, cfg: LowMemConvConfig) -> np.ndarray:
    """Replay the probes from ``ctx.seed`` and estimate the weight gradient."""
    shape = ctx.meta[0]
    if cfg.meta(shape) != ctx.meta:
        raise ContextError("layer configuration differs from the one that produced the context")
    if dy.shape != shape or dy.channels != cfg.weights.c_out or dy.batch != ctx.xbar.shape[-1]:
        raise DimensionError("output gradient does not match the stored context")
    probes = draw_probes(cfg.mode, shape.n, cfg.weights.c_in, cfg.weights.c_out, cfg.r,
                         ctx.seed, cfg.sparsity)
    return probed_grad_array(ctx.xbar, probes, dy.values, shape, cfg.weights.offset_map.offsets)


def backward_input(dy: ChannelTensor, cfg: LowMemConvConfig) -> ChannelTensor:
    return grad_input_exact(dy, cfg.weights)


@dataclass(frozen=True)
class MemoryFootprint:
    conventional: int
    probed: int

    @property
    def factor(self) -> float:
        return self.conventional / self.probed


def memory_footprint(n_pixels: int, c_in: int, r: int, batch: int = 1, mode: str = "multi",
                     c_out: int = 1) -> MemoryFootprint:
    """Scalars kept for the backward pass: full input vs. probed sketch.

    The reduction factor for ``multi``/``ortho`` is ``N * c_in / r``.
    """
    conventional = n_pixels * c_in * batch
    probed = r * batch * (c_in * c_out if mode == "indep" else 1)
    return MemoryFootprint(conventional, probed)
