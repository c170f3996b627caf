"""Seeded probing matrices for multi-channel trace estimation.

Random bits come from the Philox-4x64-10 counter generator keyed by
``(seed, stream)``.  Counter word 3 selects the purpose of the draw
(Gaussian values, block masks, per-pair probes) and word 2 the redraw
attempt, so every sub-stream is addressable without stepping another.

Normal variates use Box-Muller on consecutive raw words: words ``2i`` and
``2i+1`` give ``u1 = (a >> 11 + 1) / 2**53`` in (0, 1] and
``u2 = (b >> 11) / 2**53`` in [0, 1), and produce the pair
``sqrt(-2 ln u1) * (cos 2 pi u2, sin 2 pi u2)`` at output positions
``2i`` and ``2i+1``.  Arrays are filled in C order.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateSparsityError, DimensionError, DomainError

_MASK64 = (1 << 64) - 1
_NORMAL, _MASK, _PAIR = 0, 1, 2
MAX_REDRAWS = 16


@dataclass(frozen=True)
class ProbeSeed:
    seed: int
    stream: int = 0

    def __post_init__(self):
        object.__setattr__(self, "seed", int(self.seed) & _MASK64)
        object.__setattr__(self, "stream", int(self.stream) & _MASK64)


def _splitmix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_stream(layer_id: int, iteration: int) -> int:
    """Stream id for one layer at one training iteration."""
    return _splitmix64(_splitmix64(int(layer_id) & _MASK64) ^ (int(iteration) & _MASK64))


def _bitgen(seed: ProbeSeed, purpose: int, attempt: int = 0) -> np.random.Philox:
    key = np.array([seed.seed, seed.stream], dtype=np.uint64)
    counter = np.array([0, 0, attempt, purpose], dtype=np.uint64)
    return np.random.Philox(key=key, counter=counter)


def _unit_interval(raw: np.ndarray) -> np.ndarray:
    return (raw >> np.uint64(11)).astype(np.float64) * 2.0 ** -53


def standard_normal(seed: ProbeSeed, size, purpose: int = _NORMAL, attempt: int = 0) -> np.ndarray:
    shape = (size,) if np.isscalar(size) else tuple(size)
    count = int(np.prod(shape, dtype=np.int64))
    half = (count + 1) // 2
    raw = _bitgen(seed, purpose, attempt).random_raw(2 * half)
    u1 = _unit_interval(raw[0::2]) + 2.0 ** -53
    u2 = _unit_interval(raw[1::2])
    rad = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    out = np.empty(2 * half)
    out[0::2] = rad * np.cos(theta)
    out[1::2] = rad * np.sin(theta)
    return out[:count].reshape(shape)


def uniform(seed: ProbeSeed, size, purpose: int = _MASK, attempt: int = 0) -> np.ndarray:
    shape = (size,) if np.isscalar(size) else tuple(size)
    count = int(np.prod(shape, dtype=np.int64))
    return _unit_interval(_bitgen(seed, purpose, attempt).random_raw(count)).reshape(shape)


@dataclass(frozen=True)
class BlockSparsity:
    probs: tuple

    def __post_init__(self):
        probs = tuple(float(p) for p in self.probs)
        if not probs:
            raise DomainError("need at least one block probability")
        for p in probs:
            if not 0.0 < p <= 1.0:
                raise DomainError(f"block probability must be in (0, 1], got {p}")
        object.__setattr__(self, "probs", probs)

    @classmethod
    def uniform(cls, c_in: int, p: float | None = None) -> BlockSparsity:
        """Same probability for every block; defaults to ``1 / c_in``."""
        return cls((1.0 / c_in if p is None else p,) * c_in)

    @property
    def p_min(self) -> float:
        return min(self.probs)


@dataclass(frozen=True, eq=False)
class ProbeMatrix:
    """``r`` probes of length ``n * c_in``, stored as ``(c_in, n, r)`` blocks.

    ``blocks.reshape(c_in * n, r)`` is the stacked probing matrix Z whose
    row ``b * n + p`` is pixel ``p`` of channel block ``b``.
    """

    blocks: np.ndarray
    mask: np.ndarray
    seed: ProbeSeed | None
    attempt: int = 0
    norm: np.ndarray | None = None

    @property
    def c_in(self) -> int:
        return self.blocks.shape[0]

    @property
    def n(self) -> int:
        return self.blocks.shape[1]

    @property
    def r(self) -> int:
        return self.blocks.shape[2]

    @property
    def nnz(self) -> np.ndarray:
        """Active columns per block, shape ``(c_in,)``."""
        return self.mask.sum(axis=1)

    @property
    def normalizer(self) -> np.ndarray:
        """Per-block divisor of the block Gram estimate: ``nnz`` unless set explicitly."""
        return self.nnz if self.norm is None else self.norm

    @property
    def matrix(self) -> np.ndarray:
        return self.blocks.reshape(self.c_in * self.n, self.r)


def _check_sizes(n, c_in, r):
    if n < 1 or c_in < 1 or r < 1:
        raise DimensionError(f"probe sizes must be positive, got n={n}, c_in={c_in}, r={r}")


def gen_gaussian(n: int, c_in: int, r: int, seed: ProbeSeed) -> ProbeMatrix:
    _check_sizes(n, c_in, r)
    blocks = standard_normal(seed, (c_in, n, r))
    return ProbeMatrix(blocks, np.ones((c_in, r), dtype=bool), seed)


def gen_block_sparse(n: int, c_in: int, r: int, sp: BlockSparsity, seed: ProbeSeed,
                     max_redraws: int = MAX_REDRAWS) -> ProbeMatrix:
    """Gaussian probes whose ``(block, column)`` pieces are kept with probability ``p_n``.

    Mask rows are independent, so a row left without an active column is
    redrawn on its own from the next attempt sub-stream; this samples each
    row conditioned on being non-empty.  The Gaussian values come from
    attempt 0 regardless.
    """
    _check_sizes(n, c_in, r)
    if len(sp.probs) != c_in:
        raise DimensionError(f"sparsity has {len(sp.probs)} probabilities for {c_in} blocks")
    probs = np.asarray(sp.probs)[:, None]
    mask = uniform(seed, (c_in, r)) < probs
    attempt = 0
    while not mask.any(axis=1).all():
        attempt += 1
        if attempt > max_redraws:
            raise DegenerateSparsityError(
                f"some block stayed empty after {max_redraws + 1} draws (p_min={sp.p_min}, r={r})")
        empty = ~mask.any(axis=1)
        mask[empty] = (uniform(seed, (c_in, r), attempt=attempt) < probs)[empty]
    blocks = standard_normal(seed, (c_in, n, r))
    blocks *= mask[:, None, :]
    return ProbeMatrix(blocks, mask, seed, attempt)


def gen_pairwise(n: int, c_in: int, c_out: int, r: int, seed: ProbeSeed) -> np.ndarray:
    """Independent Gaussian probe sets, one per (output, input) channel pair.

    Returns an array ``(c_out, c_in, n, r)``.
    """
    _check_sizes(n, c_in, r)
    return standard_normal(seed, (c_out, c_in, n, r), purpose=_PAIR)


def identity_probe(n: int, c_in: int) -> ProbeMatrix:
    """Deterministic lossless probe ``Z = I`` (test hook, ``r = n * c_in``)."""
    eye = np.eye(n * c_in).reshape(c_in, n, n * c_in)
    mask = np.repeat(np.eye(c_in, dtype=bool), n, axis=1)
    return ProbeMatrix(eye, mask, None, norm=np.ones(c_in))


def block_gram(z: ProbeMatrix) -> np.ndarray:
    """Frobenius distance of each normalized block of ``Z Z^T`` from the identity.

    Entry ``(a, b)`` is ``|| Z_a Z_b^T / nnz(a) - [a == b] I ||_F``, computed
    through the ``r x r`` Gram matrices ``G_a = Z_a^T Z_a`` so that no
    ``n x n`` block is formed.
    """
    grams = np.einsum("apj,apk->ajk", z.blocks, z.blocks)
    nnz = np.maximum(z.normalizer, 1).astype(float)
    cross = np.einsum("ajk,bjk->ab", grams, grams)
    sq = cross / nnz[:, None] ** 2
    diag = np.arange(z.c_in)
    traces = np.trace(grams, axis1=1, axis2=2)
    sq[diag, diag] += -2.0 * traces / nnz + z.n
    return np.sqrt(np.maximum(sq, 0.0))
