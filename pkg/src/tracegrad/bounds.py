"""Deviation bounds for Gaussian trace estimators and their Monte Carlo coverage."""
from __future__ import annotations

from dataclasses import dataclass
from math import exp, log, sqrt

import numpy as np

from .errors import CapacityError, DomainError
from .probing import BlockSparsity, ProbeSeed
from .tensor import DENSE_LIMIT
from .trace import (BlockLinearMap, LinearMap, estimate_blocks, exact_block_traces,
                    hutchinson)


@dataclass(frozen=True)
class MatrixNorms:
    spectral: float
    frobenius: float
    dim: int


def norms(a) -> MatrixNorms:
    a = np.asarray(a, dtype=float)
    if max(a.shape) > DENSE_LIMIT:
        raise CapacityError(f"matrix of shape {a.shape} exceeds dense limit {DENSE_LIMIT}")
    spectral = float(np.linalg.svd(a, compute_uv=False)[0]) if a.size else 0.0
    return MatrixNorms(spectral, float(np.sqrt(np.sum(a * a))), a.shape[0])


def _check_delta(delta):
    if not 0.0 < delta < 1.0:
        raise DomainError(f"delta must lie in (0, 1), got {delta}")


def _check_r(r):
    if r < 1:
        raise DomainError(f"r must be at least 1, got {r}")


def prop1_bound(nm: MatrixNorms, r: int, delta: float) -> float:
    """``4 |A|_2 / r log(2/delta) + 2 |A|_F / sqrt(r) log^(1/2)(2/delta)``."""
    _check_delta(delta)
    _check_r(r)
    ell = log(2.0 / delta)
    return 4.0 * nm.spectral / r * ell + 2.0 * nm.frobenius / sqrt(r) * sqrt(ell)


def lemma2_bound(nm: MatrixNorms, r: int, delta: float, c: float = 1.0) -> float:
    """Deviation of ``(1/r) sum z_j^T A x_j`` for independent Gaussian ``z``, ``x``."""
    _check_delta(delta)
    _check_r(r)
    ell = log(2.0 / delta)
    return c * (nm.spectral / r * ell + nm.frobenius / sqrt(r) * sqrt(ell))


def lemma3_bound(nm: MatrixNorms, r: int, delta: float, p: float, c: float = 1.0):
    """Same bilinear form with ``x_j`` kept with probability ``p``.

    Returns ``(bound, extra_failure_probability)``; the bound holds with
    probability at least ``1 - delta - extra``.
    """
    _check_delta(delta)
    _check_r(r)
    if not 0.0 < p <= 1.0:
        raise DomainError(f"p must lie in (0, 1], got {p}")
    ell = log(2.0 / delta)
    bound = c * (nm.spectral / r * ell + sqrt(p) * nm.frobenius / sqrt(r) * sqrt(ell))
    return bound, 2.0 * exp(-r * p * p / 2.0)


def effective_rank(nm: MatrixNorms, delta: float):
    """``rho = |A|_F^2 / |A|_2^2`` and the crossover ``r* = (4 / rho) log(2/delta)``."""
    _check_delta(delta)
    if nm.spectral <= 0.0:
        raise DomainError("effective rank is undefined for the zero matrix")
    rho = nm.frobenius ** 2 / nm.spectral ** 2
    return rho, 4.0 / rho * log(2.0 / delta)


@dataclass(frozen=True)
class BoundReport:
    bound_value: float
    succinct_value: float
    first_term: float
    second_term: float
    delta: float
    r: int
    regime: str
    effective_rank: float
    phase_transition_r: float
    failure_prob_extra: float


def thm2_bound(block_norms, sp: BlockSparsity, m: int, n: int, r: int, delta: float,
               c: float = 1.0) -> BoundReport:
    """Bound on the orthogonalized estimate of ``tr(A[m, n])``.

    ``block_norms[m][k]`` holds the :class:`MatrixNorms` of block ``A[m, k]``.
    ``C^2`` in the logarithm is taken as ``c_out * c_in``.  The succinct
    value keeps only the ``1 / sqrt(r)`` term and is meaningful for large r.
    ``phase_transition_r`` is where the two terms are equal.
    """
    _check_delta(delta)
    _check_r(r)
    if c <= 0:
        raise DomainError(f"constant c must be positive, got {c}")
    row = list(block_norms[m])
    c_in = len(row)
    c_out = len(block_norms)
    if len(sp.probs) != c_in:
        raise DomainError("sparsity length must equal the number of input blocks")
    p = sp.probs
    ell = log(c_out * c_in / delta)
    first_coef = sum(nk.spectral for nk in row) / p[n] * ell
    second_coef = (row[n].frobenius / sqrt(p[n])
                   + sum(sqrt(p[k] / p[n]) * row[k].frobenius for k in range(c_in) if k != n)) * sqrt(ell)
    first = c * first_coef / r
    second = c * second_coef / sqrt(r)
    diag = row[n]
    if diag.spectral > 0:
        rho = diag.frobenius ** 2 / diag.spectral ** 2
    else:
        rho = 0.0
    crossover = (first_coef / second_coef) ** 2 if second_coef > 0 else 0.0
    return BoundReport(
        bound_value=first + second,
        succinct_value=second,
        first_term=first,
        second_term=second,
        delta=delta,
        r=r,
        regime="small-r" if first > second else "large-r",
        effective_rank=rho,
        phase_transition_r=crossover,
        failure_prob_extra=2.0 * c_in * exp(-r * sp.p_min ** 2 / 2.0),
    )


def block_norm_grid(blocks) -> list:
    blocks = np.asarray(blocks)
    return [[norms(blocks[m, k]) for k in range(blocks.shape[1])] for m in range(blocks.shape[0])]


# -- coverage ----------------------------------------------------------------------

@dataclass(frozen=True)
class Coverage:
    failure_rate: float
    trials: int
    delta: float
    bound: float
    errors: np.ndarray

    @property
    def binomial_se(self) -> float:
        return sqrt(self.delta * (1.0 - self.delta) / self.trials)

    def passes(self, n_se: float = 3.0) -> bool:
        return self.failure_rate <= self.delta + n_se * self.binomial_se


def hutchinson_errors(a, r: int, trials: int, seed: int) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    lm = LinearMap.from_dense(a)
    tr = float(np.trace(a))
    return np.array([abs(hutchinson(lm, r, ProbeSeed(seed, t)).value - tr) for t in range(trials)])


def coverage_test(a, delta: float, r: int, trials: int, seed: int) -> Coverage:
    """Empirical rate at which single-matrix estimates exceed the explicit bound."""
    if trials < 1000:
        raise DomainError(f"coverage needs at least 1000 trials, got {trials}")
    bound = prop1_bound(norms(a), r, delta)
    errors = hutchinson_errors(a, r, trials, seed)
    return Coverage(float(np.mean(errors > bound)), trials, delta, bound, errors)


def ortho_block_errors(blocks, r: int, trials: int, seed: int, sp: BlockSparsity | None = None,
                       estimator: str = "ortho") -> np.ndarray:
    """``(trials, c_out, c_in)`` absolute errors of the multi-channel estimators."""
    blocks = np.asarray(blocks, dtype=float)
    a = BlockLinearMap.from_blocks(blocks)
    exact = exact_block_traces(blocks)
    out = np.empty((trials,) + exact.shape)
    for t in range(trials):
        out[t] = np.abs(estimate_blocks(a, estimator, r, ProbeSeed(seed, t), sp).values - exact)
    return out


def thm2_coverage(blocks, sp: BlockSparsity, r: int, delta: float, c: float, trials: int,
                  seed: int, errors: np.ndarray | None = None) -> Coverage:
    """Failure rate of the simultaneous bound: a trial fails if any block exceeds its bound."""
    if trials < 1000:
        raise DomainError(f"coverage needs at least 1000 trials, got {trials}")
    grid = block_norm_grid(blocks)
    c_out, c_in = len(grid), len(grid[0])
    bounds = np.array([[thm2_bound(grid, sp, m, n, r, delta, c).bound_value for n in range(c_in)]
                       for m in range(c_out)])
    if errors is None:
        errors = ortho_block_errors(blocks, r, trials, seed, sp)
    failed = np.any(errors > bounds[None], axis=(1, 2))
    return Coverage(float(np.mean(failed)), trials, delta, float(bounds.max()), errors)


def fit_thm2_constant(blocks, sp: BlockSparsity, r: int, delta: float, trials: int,
                      seed: int) -> tuple:
    """Smallest ``c`` whose simultaneous failure rate is at most ``delta``.

    Returns ``(c, coverage_at_c)``.
    """
    grid = block_norm_grid(blocks)
    c_out, c_in = len(grid), len(grid[0])
    unit = np.array([[thm2_bound(grid, sp, m, n, r, delta, 1.0).bound_value for n in range(c_in)]
                     for m in range(c_out)])
    errors = ortho_block_errors(blocks, r, trials, seed, sp)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(unit[None] > 0, errors / unit[None], 0.0)
    worst = np.sort(ratios.reshape(trials, -1).max(axis=1))
    allowed = int(np.floor(delta * trials))
    c = float(worst[trials - allowed - 1]) if allowed < trials else 0.0
    c = max(c, np.finfo(float).tiny)
    return c, thm2_coverage(blocks, sp, r, delta, c, trials, seed, errors=errors)
