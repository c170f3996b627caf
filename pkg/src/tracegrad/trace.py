"""Randomized trace estimators for single and stacked block matrices."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import stats

from .errors import DimensionError, DomainError
from .probing import (BlockSparsity, ProbeMatrix, ProbeSeed, gen_block_sparse,
                      gen_gaussian)


@dataclass(frozen=True)
class LinearMap:
    """Matrix-free square operator.

    ``apply`` and ``apply_adjoint`` must accept a length-``dim`` vector or a
    ``(dim, k)`` array of column vectors.
    """

    apply: Callable
    apply_adjoint: Callable
    dim: int

    @classmethod
    def from_dense(cls, a) -> LinearMap:
        a = np.asarray(a, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DimensionError(f"expected a square matrix, got shape {a.shape}")
        return cls(lambda v: a @ v, lambda v: a.T @ v, a.shape[0])


@dataclass(frozen=True)
class BlockLinearMap:
    """Stacked operator with ``c_out x c_in`` blocks of size ``n x n``.

    ``apply`` maps a ``(c_in * n, k)`` array to ``(c_out * n, k)``; block
    ``m`` of the output occupies rows ``m * n : (m + 1) * n``.
    """

    apply: Callable
    c_out: int
    c_in: int
    n: int

    @classmethod
    def from_blocks(cls, blocks) -> BlockLinearMap:
        """Wrap a dense ``(c_out, c_in, n, n)`` block array."""
        blocks = np.asarray(blocks, dtype=float)
        c_out, c_in, n, _ = blocks.shape
        dense = blocks.transpose(0, 2, 1, 3).reshape(c_out * n, c_in * n)
        return cls(lambda v: dense @ v, c_out, c_in, n)


@dataclass(frozen=True)
class TraceEstimate:
    value: float
    r_used: int
    nnz_used: int
    seed: ProbeSeed | None


@dataclass(frozen=True)
class BlockTraceEstimate:
    """Estimates of all block traces; ``values[m, n]`` estimates ``tr(A[m, n])``."""

    values: np.ndarray
    r_used: int
    nnz_used: np.ndarray
    seed: ProbeSeed | None

    def __getitem__(self, idx) -> TraceEstimate:
        m, n = idx
        return TraceEstimate(float(self.values[m, n]), self.r_used, int(self.nnz_used[n]), self.seed)


def exact_trace(a) -> float:
    a = np.asarray(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"trace needs a square matrix, got shape {a.shape}")
    return float(np.trace(a))


def exact_block_traces(blocks) -> np.ndarray:
    return np.trace(np.asarray(blocks), axis1=2, axis2=3)


def _contract(z_blocks: np.ndarray, az_blocks: np.ndarray, scale: np.ndarray) -> np.ndarray:
    # values[m, n] = sum_{p, j} z[n, p, j] * az[m, p, j] * scale[n]
    c_out, c_in = az_blocks.shape[0], z_blocks.shape[0]
    out = np.empty((c_out, c_in))
    for m in range(c_out):
        for n in range(c_in):
            out[m, n] = np.sum(z_blocks[n] * az_blocks[m]) * scale[n]
    return out


def _probe_blocks(a: BlockLinearMap, z: ProbeMatrix, scale) -> np.ndarray:
    az = np.asarray(a.apply(z.matrix)).reshape(a.c_out, a.n, z.r)
    return _contract(z.blocks, az, scale)


def hutchinson(a: LinearMap, r: int, seed: ProbeSeed) -> TraceEstimate:
    """``(1/r) sum_j z_j^T A z_j`` with Gaussian probes."""
    if r < 1:
        raise DomainError(f"need at least one probe, got r={r}")
    z = gen_gaussian(a.dim, 1, r, seed)
    az = np.asarray(a.apply(z.matrix)).reshape(1, a.dim, r)
    value = _contract(z.blocks, az, np.array([1.0 / r]))[0, 0]
    return TraceEstimate(float(value), r, r, seed)


def multichannel_naive(a: BlockLinearMap, r: int, seed: ProbeSeed) -> BlockTraceEstimate:
    """All block traces from one set of dense Gaussian stacked probes."""
    if r < 1:
        raise DomainError(f"need at least one probe, got r={r}")
    z = gen_gaussian(a.n, a.c_in, r, seed)
    values = _probe_blocks(a, z, np.full(a.c_in, 1.0 / r))
    return BlockTraceEstimate(values, r, np.full(a.c_in, r), seed)


def multichannel_ortho(a: BlockLinearMap, z: ProbeMatrix) -> BlockTraceEstimate:
    """Block traces from block-sparse probes, normalized by active columns per input block."""
    if z.c_in != a.c_in or z.n != a.n:
        raise DimensionError(
            f"probe blocks ({z.c_in} x {z.n}) do not match operator ({a.c_in} x {a.n})")
    nnz = z.normalizer
    values = _probe_blocks(a, z, 1.0 / nnz)
    return BlockTraceEstimate(values, z.r, nnz, z.seed)


def estimate_blocks(a: BlockLinearMap, estimator: str, r: int, seed: ProbeSeed,
                    sparsity: BlockSparsity | None = None) -> BlockTraceEstimate:
    """Dispatch on estimator name: ``naive`` or ``ortho``."""
    if estimator == "naive":
        return multichannel_naive(a, r, seed)
    if estimator == "ortho":
        sp = sparsity or BlockSparsity.uniform(a.c_in)
        return multichannel_ortho(a, gen_block_sparse(a.n, a.c_in, r, sp, seed))
    raise ValueError(f"unknown estimator {estimator!r}")


# -- empirical convergence --------------------------------------------------------

@dataclass(frozen=True)
class ErrorStats:
    r_grid: np.ndarray
    mean_abs: np.ndarray
    std_abs: np.ndarray
    median_abs: np.ndarray
    slope: float
    errors: np.ndarray  # (len(r_grid), trials)

    def rows(self):
        for k, r in enumerate(self.r_grid):
            yield int(r), float(self.mean_abs[k]), float(self.std_abs[k]), float(self.median_abs[k])


def fit_loglog_slope(r_grid, err) -> float:
    x = np.log(np.asarray(r_grid, dtype=float))
    y = np.log(np.asarray(err, dtype=float))
    slope, _ = np.polyfit(x, y, 1)
    return float(slope)


def estimator_error_stats(a, exact, estimator: str, r_grid, trials: int, seed: int,
                          sparsity: BlockSparsity | None = None, fit_from: int | None = None,
                          aggregate: str = "mean") -> ErrorStats:
    """Absolute error of an estimator over ``trials`` independent seeds per ``r``.

    ``a`` is a :class:`LinearMap` with ``estimator="hutchinson"`` and scalar
    ``exact``, or a :class:`BlockLinearMap` with ``naive``/``ortho`` and an
    array of exact block traces; the per-trial block error is reduced with
    ``aggregate`` (``mean`` or ``median`` of absolute block errors).  The
    slope is fitted to the median error on grid points ``r >= fit_from``.
    """
    if trials < 30:
        raise DomainError(f"need at least 30 trials, got {trials}")
    r_grid = np.asarray(sorted(int(r) for r in r_grid))
    reduce = {"mean": np.mean, "median": np.median}[aggregate]
    errors = np.empty((len(r_grid), trials))
    for k, r in enumerate(r_grid):
        for t in range(trials):
            ps = ProbeSeed(seed, (int(r) << 32) | t)
            if estimator == "hutchinson":
                errors[k, t] = abs(hutchinson(a, int(r), ps).value - exact)
            else:
                est = estimate_blocks(a, estimator, int(r), ps, sparsity)
                errors[k, t] = reduce(np.abs(est.values - exact))
    median = np.median(errors, axis=1)
    sel = r_grid >= (fit_from if fit_from is not None else r_grid[0])
    slope = fit_loglog_slope(r_grid[sel], median[sel]) if np.all(median[sel] > 0) and sel.sum() >= 2 else 0.0
    return ErrorStats(r_grid, errors.mean(axis=1), errors.std(axis=1, ddof=1), median, slope, errors)


@dataclass(frozen=True)
class PhaseTransition:
    r: float
    left_slope: float
    right_slope: float
    f_stat: float
    significant: bool


def locate_phase_transition(r_grid, err, level: float = 0.99) -> PhaseTransition:
    """Two-segment least squares on the log-log error curve.

    Fits a continuous hinge with the knot at each interior grid point and
    keeps the best one.  The knot counts only when the F statistic against
    a single line exceeds the ``level`` quantile of F(2, n - 4); otherwise
    no transition is resolved inside the grid and the first grid point is
    reported.
    """
    r_grid = np.asarray(r_grid, dtype=float)
    x = np.log(r_grid)
    y = np.log(np.asarray(err, dtype=float))
    n = len(x)
    if n < 5:
        raise DomainError("need at least 5 grid points to locate a transition")
    line = np.polyfit(x, y, 1)
    sse1 = float(np.sum((np.polyval(line, x) - y) ** 2))
    best = None
    for k in range(1, n - 1):
        knot = x[k]
        basis = np.column_stack([np.ones(n), np.minimum(x - knot, 0.0), np.maximum(x - knot, 0.0)])
        coef, *_ = np.linalg.lstsq(basis, y, rcond=None)
        sse = float(np.sum((basis @ coef - y) ** 2))
        if best is None or sse < best[0]:
            best = (sse, k, coef)
    sse2, k, coef = best
    f_stat = ((sse1 - sse2) / 2.0) / max(sse2 / (n - 4), 1e-300)
    significant = bool(f_stat > stats.f.ppf(level, 2, n - 4))
    r_star = float(r_grid[k]) if significant else float(r_grid[0])
    return PhaseTransition(r_star, float(coef[1]), float(coef[2]), float(f_stat), significant)


# -- test matrix families ---------------------------------------------------------

def matrix_family(name: str, dim: int, rng=None) -> np.ndarray:
    """Named dense test matrices, scaled to unit Frobenius norm except ``identity``/``diagonal``.

    ``rank1`` is ``u v^T`` with independent unit vectors, so it is
    asymmetric with effective rank exactly one.
    """
    rng = np.random.default_rng(rng)
    if name == "identity":
        return np.eye(dim)
    if name == "diagonal":
        return np.diag(np.arange(1, dim + 1, dtype=float))
    if name == "rank1":
        u = rng.standard_normal(dim)
        v = rng.standard_normal(dim)
        return np.outer(u, v) / (np.linalg.norm(u) * np.linalg.norm(v))
    if name == "symmetric":
        g = rng.standard_normal((dim, dim))
        s = (g + g.T) / 2
        return s / np.linalg.norm(s)
    if name in ("gaussian", "asymmetric"):
        g = rng.standard_normal((dim, dim))
        return g / np.linalg.norm(g)
    raise ValueError(f"unknown matrix family {name!r}")


def crosstalk_blocks(c: int, n: int, rng=None, diag_scale: float = 1e-3) -> np.ndarray:
    """Block matrix with tiny diagonal blocks and one large off-diagonal block per row.

    Row ``m`` carries a unit-Frobenius Gaussian block at column
    ``(m + 1) % c``; diagonal blocks are Gaussian scaled to ``diag_scale``;
    all other blocks are zero.  Returns ``(c, c, n, n)``.
    """
    rng = np.random.default_rng(rng)
    blocks = np.zeros((c, c, n, n))
    for m in range(c):
        d = rng.standard_normal((n, n))
        blocks[m, m] = diag_scale * d / np.linalg.norm(d)
        if c > 1:
            g = rng.standard_normal((n, n))
            blocks[m, (m + 1) % c] = g / np.linalg.norm(g)
    return blocks


def sparse_block_map(blocks: np.ndarray) -> BlockLinearMap:
    """Block operator that skips all-zero blocks when applying."""
    c_out, c_in, n, _ = blocks.shape
    nonzero = [(m, k, blocks[m, k]) for m in range(c_out) for k in range(c_in)
               if np.any(blocks[m, k])]

    def apply(v):
        v = np.asarray(v)
        vb = v.reshape(c_in, n, -1)
        out = np.zeros((c_out, n, vb.shape[2]))
        for m, k, blk in nonzero:
            out[m] += blk @ vb[k]
        return out.reshape(c_out * n, *v.shape[1:])

    return BlockLinearMap(apply, c_out, c_in, n)
