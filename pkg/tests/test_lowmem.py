import numpy as np
import pytest

from tracegrad.errors import ContextError, DimensionError, DomainError
from tracegrad.gradcheck import monte_carlo_unbiasedness, random_instance
from tracegrad.lowmem import (LowMemConvConfig, backward_input, backward_weights, draw_probes,
                              forward_compressed, memory_footprint)
from tracegrad.probing import BlockSparsity, ProbeSeed
from tracegrad.shiftconv import ConvWeights, conv_forward, grad_input_exact, grad_weights_exact
from tracegrad.tensor import ChannelTensor, ImageShape, dense_shift_matrix


def setup(h=4, w=4, c_in=2, c_out=3, b=2, seed=0):
    rng = np.random.default_rng(seed)
    x = ChannelTensor.random(ImageShape(h, w), c_in, b, rng)
    dy = ChannelTensor.random(ImageShape(h, w), c_out, b, rng)
    return x, dy, ConvWeights.random(3, c_in, c_out, rng)


@pytest.mark.parametrize("mode", ["multi", "ortho", "indep"])
def test_forward_is_exact(mode):
    x, _, w = setup()
    y, ctx = forward_compressed(x, LowMemConvConfig(5, w, mode), ProbeSeed(1))
    assert np.array_equal(y.values, conv_forward(x, w).values)


def test_context_stores_r_times_b():
    x, _, w = setup(b=3)
    _, ctx = forward_compressed(x, LowMemConvConfig(7, w, "ortho"), ProbeSeed(1))
    assert ctx.xbar.shape == (7, 3) and ctx.stored_scalars == 21
    assert isinstance(ctx.stored_scalars, int)


def test_context_factor_128():
    rng = np.random.default_rng(0)
    x = ChannelTensor.random(ImageShape(32, 32), 16, 8, rng)
    w = ConvWeights.random(3, 16, 1, rng)
    _, ctx = forward_compressed(x, LowMemConvConfig(128, w, "multi"), ProbeSeed(2))
    assert ctx.stored_scalars == 128 * 8
    assert x.values.size // ctx.stored_scalars == 128


def test_identity_probe_is_lossless():
    x, dy, w = setup()
    cfg = LowMemConvConfig(32, w, "identity")
    _, ctx = forward_compressed(x, cfg, ProbeSeed(0))
    assert np.array_equal(ctx.xbar, x.values.reshape(32, 2))
    g = backward_weights(ctx, dy, cfg)
    assert np.allclose(g, grad_weights_exact(x, dy, w.offset_map), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("mode", ["multi", "ortho", "indep"])
def test_zero_residual(mode):
    x, dy, w = setup()
    cfg = LowMemConvConfig(4, w, mode)
    _, ctx = forward_compressed(x, cfg, ProbeSeed(3))
    g = backward_weights(ctx, ChannelTensor(dy.shape, np.zeros_like(dy.values)), cfg)
    assert not np.any(g)


def test_straight_line_oracle_single_channel():
    # dw_i = (1/r) sum_j (z_j^T X)(dY^T T_{k(i)} z_j)^T, with explicit shift matrices
    x, dy, w = setup(c_in=1, c_out=1, b=3, seed=4)
    r = 6
    cfg = LowMemConvConfig(r, w, "multi")
    seed = ProbeSeed(5, 2)
    _, ctx = forward_compressed(x, cfg, seed)
    z = draw_probes("multi", 16, 1, 1, r, seed).matrix
    X, dY = x.values[0], dy.values[0]
    ref = np.zeros(9)
    for i, off in enumerate(w.offset_map.offsets):
        p = dense_shift_matrix(x.shape, off)
        for j in range(r):
            ref[i] += (z[:, j] @ X) @ (dY.T @ (p @ z[:, j]))
        ref[i] /= r
    got = backward_weights(ctx, dy, cfg)[0, 0]
    assert np.allclose(got, ref, rtol=1e-12, atol=1e-12)


def test_straight_line_oracle_ortho_multichannel():
    x, dy, w = setup(c_in=3, c_out=2, b=2, seed=6)
    r = 8
    sp = BlockSparsity.uniform(3, 0.5)
    cfg = LowMemConvConfig(r, w, "ortho", sp)
    seed = ProbeSeed(7)
    _, ctx = forward_compressed(x, cfg, seed)
    z = draw_probes("ortho", 16, 3, 2, r, seed, sp)
    xbar = z.matrix.T @ x.values.reshape(48, 2)
    ref = np.zeros((2, 3, 9))
    for m in range(2):
        for n in range(3):
            for i, off in enumerate(w.offset_map.offsets):
                p = dense_shift_matrix(x.shape, off)
                for j in range(r):
                    ref[m, n, i] += xbar[j] @ (dy.values[m].T @ (p @ z.blocks[n, :, j]))
                ref[m, n, i] /= z.nnz[n]
    assert np.allclose(backward_weights(ctx, dy, cfg), ref, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("mode", ["multi", "ortho", "indep"])
def test_unbiased_small(mode):
    inst = random_instance(4, 4, 2, 2, 3, 2, seed=8)
    assert monte_carlo_unbiasedness(inst, mode, 8, 2000, 9).passes(4.0)


@pytest.mark.parametrize("mode", ["multi", "ortho", "indep"])
def test_replay_is_bit_exact(mode):
    x, dy, w = setup()
    cfg = LowMemConvConfig(5, w, mode)
    _, ctx = forward_compressed(x, cfg, ProbeSeed(10))
    assert np.array_equal(backward_weights(ctx, dy, cfg), backward_weights(ctx, dy, cfg))


def test_context_mismatch():
    x, dy, w = setup()
    _, ctx = forward_compressed(x, LowMemConvConfig(5, w, "ortho"), ProbeSeed(0))
    with pytest.raises(ContextError):
        backward_weights(ctx, dy, LowMemConvConfig(6, w, "ortho"))
    with pytest.raises(ContextError):
        backward_weights(ctx, dy, LowMemConvConfig(5, w, "multi"))
    bad = ChannelTensor.random(ImageShape(4, 4), 3, 5, rng=0)
    with pytest.raises(DimensionError):
        backward_weights(ctx, bad, LowMemConvConfig(5, w, "ortho"))


def test_config_validation():
    _, _, w = setup()
    with pytest.raises(DomainError):
        LowMemConvConfig(0, w)
    with pytest.raises(ValueError):
        LowMemConvConfig(4, w, "sketchy")
    with pytest.raises(DimensionError):
        LowMemConvConfig(4, w, "ortho", BlockSparsity.uniform(5))
    assert LowMemConvConfig(4, w, "ortho").sparsity.probs == (0.5, 0.5)


def test_backward_input_is_exact():
    _, dy, w = setup()
    cfg = LowMemConvConfig(4, w)
    assert np.array_equal(backward_input(dy, cfg).values, grad_input_exact(dy, w).values)


def test_memory_footprint_examples():
    fp = memory_footprint(1024, 16, 128)
    assert fp.factor == 128 and fp.probed == 128
    assert memory_footprint(64, 4, 256).factor == 1
    assert memory_footprint(28 * 28, 1, 16).factor == 49
    fp = memory_footprint(64, 2, 16, batch=4, mode="indep", c_out=3)
    assert fp.probed == 16 * 4 * 6 and fp.conventional == 64 * 2 * 4
