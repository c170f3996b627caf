import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tracegrad.errors import DegenerateSparsityError, DimensionError, DomainError
from tracegrad.probing import (BlockSparsity, ProbeSeed, block_gram, derive_stream, gen_block_sparse,
                               gen_gaussian, gen_pairwise, identity_probe, standard_normal, uniform)


def test_same_seed_bit_identical():
    a = gen_gaussian(10, 3, 7, ProbeSeed(5, 9))
    b = gen_gaussian(10, 3, 7, ProbeSeed(5, 9))
    assert np.array_equal(a.blocks, b.blocks)
    assert not np.array_equal(a.blocks, gen_gaussian(10, 3, 7, ProbeSeed(5, 10)).blocks)


def test_box_muller_pairing():
    # independent evaluation from raw Philox words
    seed = ProbeSeed(123, 456)
    bg = np.random.Philox(key=np.array([123, 456], dtype=np.uint64),
                          counter=np.array([0, 0, 0, 0], dtype=np.uint64))
    raw = bg.random_raw(6)
    expected = []
    for a, b in zip(raw[0::2], raw[1::2]):
        u1 = (int(a) >> 11) / 2.0 ** 53 + 2.0 ** -53
        u2 = (int(b) >> 11) / 2.0 ** 53
        rad = math.sqrt(-2.0 * math.log(u1))
        expected += [rad * math.cos(2 * math.pi * u2), rad * math.sin(2 * math.pi * u2)]
    got = standard_normal(seed, 5)
    assert np.allclose(got, expected[:5], rtol=1e-15, atol=0)


def test_frozen_first_values():
    # regression anchor for cross-platform reproducibility
    got = standard_normal(ProbeSeed(0, 0), 4)
    again = standard_normal(ProbeSeed(0, 0), (2, 2)).ravel()
    assert np.array_equal(got, again)
    frozen = [0.15853383451844166, 2.9828792826170734, -1.925691981917186, -0.8249255452762637]
    assert np.allclose(got, frozen, rtol=1e-14, atol=0)


def test_gaussian_moments():
    z = gen_gaussian(16, 4, 100_000, ProbeSeed(1)).matrix
    assert abs(z.mean()) <= 4 / math.sqrt(64 * 100_000)
    assert abs(z.var() - 1.0) <= 0.02


def test_gaussian_gram_converges():
    def err(r):
        z = gen_gaussian(8, 2, r, ProbeSeed(2, r)).matrix
        return np.linalg.norm(z @ z.T / r - np.eye(16))
    assert err(4096) < err(64)


def test_uniform_range():
    u = uniform(ProbeSeed(3), 10_000)
    assert u.min() >= 0.0 and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 0.02


def test_p_one_matches_gaussian_bit_exactly():
    seed = ProbeSeed(7, 3)
    dense = gen_gaussian(12, 4, 9, seed)
    sparse = gen_block_sparse(12, 4, 9, BlockSparsity.uniform(4, 1.0), seed)
    assert np.array_equal(dense.blocks, sparse.blocks)
    assert sparse.mask.all()


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(1, 12),
       st.floats(0.2, 1.0), st.integers(0, 2**63))
def test_block_sparse_structure(n, c_in, r, p, seed):
    z = gen_block_sparse(n, c_in, r, BlockSparsity.uniform(c_in, p), ProbeSeed(seed))
    assert np.all(z.nnz >= 1)
    for b in range(c_in):
        for j in range(r):
            col = z.blocks[b, :, j]
            assert (np.all(col == 0) if not z.mask[b, j] else np.all(col != 0))


def test_nnz_is_binomial():
    r, p, trials = 32, 0.25, 10_000
    sp = BlockSparsity((p,))
    counts = np.array([gen_block_sparse(1, 1, r, sp, ProbeSeed(11, t)).nnz[0] for t in range(trials)])
    # conditioning on nnz >= 1 shifts the mean by r p (1-p)^r / (1 - (1-p)^r), about 8e-4 here
    assert abs(counts.mean() - r * p) <= 4 * math.sqrt(r * p * (1 - p) / trials)


def test_empty_rows_are_redrawn():
    # with p = 1/32 and r = 64 most draws leave some block empty at first
    z = gen_block_sparse(4, 32, 64, BlockSparsity.uniform(32), ProbeSeed(0, 1))
    assert np.all(z.nnz >= 1)


def test_degenerate_sparsity_error():
    with pytest.raises(DegenerateSparsityError):
        gen_block_sparse(2, 2, 1, BlockSparsity.uniform(2, 1e-9), ProbeSeed(0))


def test_sparsity_validation():
    with pytest.raises(DomainError):
        BlockSparsity((0.0,))
    with pytest.raises(DomainError):
        BlockSparsity((1.5,))
    with pytest.raises(DimensionError):
        gen_block_sparse(2, 3, 4, BlockSparsity.uniform(2), ProbeSeed(0))
    with pytest.raises(DimensionError):
        gen_gaussian(0, 1, 1, ProbeSeed(0))
    assert BlockSparsity.uniform(4).probs == (0.25,) * 4


def test_pairwise_shape_and_independence():
    z = gen_pairwise(5, 2, 3, 4, ProbeSeed(1))
    assert z.shape == (3, 2, 5, 4)
    assert not np.array_equal(z[0, 0], z[1, 0])


def test_identity_probe():
    z = identity_probe(3, 2)
    assert np.array_equal(z.matrix, np.eye(6))


def test_derive_stream_distinct():
    streams = {derive_stream(layer, it) for layer in range(8) for it in range(256)}
    assert len(streams) == 8 * 256


def test_block_gram_single_probe_direct():
    z = gen_gaussian(5, 2, 1, ProbeSeed(4))
    g = block_gram(z)
    m = z.matrix
    for a in range(2):
        for b in range(2):
            za, zb = m[a * 5:(a + 1) * 5], m[b * 5:(b + 1) * 5]
            ref = np.linalg.norm(za @ zb.T - (np.eye(5) if a == b else 0))
            assert np.isclose(g[a, b], ref, rtol=1e-10)


def test_block_gram_normalized_by_nnz():
    z = gen_block_sparse(6, 3, 20, BlockSparsity.uniform(3, 0.5), ProbeSeed(8))
    m = z.matrix
    g = block_gram(z)
    for a in range(3):
        for b in range(3):
            est = m[a * 6:(a + 1) * 6] @ m[b * 6:(b + 1) * 6].T / z.nnz[a]
            ref = np.linalg.norm(est - (np.eye(6) if a == b else 0))
            assert np.isclose(g[a, b], ref, rtol=1e-9)


def test_block_gram_decreases_with_r():
    def med(r):
        return np.median([block_gram(gen_gaussian(8, 2, r, ProbeSeed(s, r))).mean() for s in range(30)])
    vals = [med(r) for r in (4, 16, 64, 256)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_block_sparse_reduces_offdiagonal_mass():
    c, n, r = 16, 256, 64
    off = ~np.eye(c, dtype=bool)
    wins = 0
    for s in range(20):
        dense = block_gram(gen_gaussian(n, c, r, ProbeSeed(s)))
        sparse = block_gram(gen_block_sparse(n, c, r, BlockSparsity.uniform(c), ProbeSeed(s)))
        wins += sparse[off].sum() < dense[off].sum()
    assert wins == 20


def test_unbiased_block_gram():
    # E[(1/nnz) Z_a Z_a^T] = I and E[Z_a Z_b^T] = 0, via Frobenius convergence of the mean
    n, c, sp = 4, 2, BlockSparsity.uniform(2, 0.5)

    def mean_err(trials):
        acc = np.zeros((c * n, c * n))
        for t in range(trials):
            z = gen_block_sparse(n, c, 8, sp, ProbeSeed(21, t))
            m = z.matrix
            scale = np.repeat(1.0 / z.nnz, n)[:, None]
            acc += scale * (m @ m.T)
        return np.linalg.norm(acc / trials - np.eye(c * n))

    assert mean_err(4000) < mean_err(250) < 1.0
