import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tracegrad.errors import CapacityError, DimensionError
from tracegrad.tensor import (ChannelTensor, ImageShape, ShiftOffset, adjoint_offset,
                              circular_shift, dense_shift_matrix, shift_images)

shapes = st.builds(ImageShape, st.integers(1, 6), st.integers(1, 6))
offsets = st.builds(ShiftOffset, st.integers(-7, 7), st.integers(-7, 7))


def loop_shift(x, shape, off):
    # index-by-index oracle for the row-major convention
    out = np.empty_like(x)
    for row in range(shape.height):
        for col in range(shape.width):
            dst = ((row + off.dy) % shape.height) * shape.width + (col + off.dx) % shape.width
            out[dst] = x[row * shape.width + col]
    return out


def test_shift_zero_is_identity():
    x = np.arange(12.0)
    assert np.array_equal(circular_shift(x, ImageShape(3, 4), ShiftOffset(0, 0)), x)


def test_shift_then_inverse():
    x = np.random.default_rng(0).standard_normal(20)
    s = ImageShape(4, 5)
    y = circular_shift(circular_shift(x, s, ShiftOffset(0, 1)), s, ShiftOffset(0, -1))
    assert np.array_equal(y, x)


def test_shift_2x2_by_row():
    out = circular_shift(np.array([1, 2, 3, 4]), ImageShape(2, 2), ShiftOffset(1, 0))
    assert out.tolist() == [3, 4, 1, 2]


def test_adjoint_offset_values():
    assert adjoint_offset(ShiftOffset(0, 0)) == ShiftOffset(0, 0)
    assert adjoint_offset(ShiftOffset(1, 2)) == ShiftOffset(-1, -2)


def test_offsets_compose_additively():
    s = ImageShape(3, 5)
    x = np.arange(15.0)
    a, b = ShiftOffset(1, 3), ShiftOffset(2, -4)
    two = circular_shift(circular_shift(x, s, a), s, b)
    assert np.array_equal(two, circular_shift(x, s, a + b))


@given(shapes, offsets, st.integers(0, 2**32 - 1))
def test_shift_matches_loop_oracle(shape, off, seed):
    x = np.random.default_rng(seed).standard_normal(shape.n)
    assert np.array_equal(circular_shift(x, shape, off), loop_shift(x, shape, off))


@given(shapes, offsets, st.integers(0, 2**32 - 1))
def test_adjoint_composition_is_bit_exact(shape, off, seed):
    x = np.random.default_rng(seed).standard_normal(shape.n)
    y = circular_shift(circular_shift(x, shape, off), shape, adjoint_offset(off))
    assert np.array_equal(y, x)


@given(shapes, offsets)
def test_dense_matrix_is_permutation(shape, off):
    p = dense_shift_matrix(shape, off)
    assert np.array_equal(p.sum(axis=0), np.ones(shape.n))
    assert np.array_equal(p.sum(axis=1), np.ones(shape.n))


@given(shapes, offsets)
def test_dense_transpose_is_adjoint(shape, off):
    assert np.array_equal(dense_shift_matrix(shape, off).T,
                          dense_shift_matrix(shape, adjoint_offset(off)))


@given(shapes, offsets, st.integers(0, 2**32 - 1))
def test_dense_matrix_matches_shift(shape, off, seed):
    x = np.random.default_rng(seed).standard_normal((shape.n, 3))
    assert np.array_equal(dense_shift_matrix(shape, off) @ x, circular_shift(x, shape, off))


@settings(max_examples=30)
@given(shapes, offsets, st.integers(0, 2**32 - 1))
def test_trace_cyclicity_with_shift(shape, off, seed):
    a = np.random.default_rng(seed).standard_normal((shape.n, shape.n))
    p = dense_shift_matrix(shape, -off)
    assert np.isclose(np.trace(a @ p), np.trace(p @ a), rtol=1e-12, atol=1e-12)


def test_dense_zero_offset_is_identity():
    assert np.array_equal(dense_shift_matrix(ImageShape(3, 3), ShiftOffset(0, 0)), np.eye(9))


def test_dense_limit():
    with pytest.raises(CapacityError):
        dense_shift_matrix(ImageShape(65, 64), ShiftOffset(0, 0))


def test_shift_images_matches_vector_shift():
    rng = np.random.default_rng(1)
    arr = rng.standard_normal((2, 3, 4, 5))
    off = ShiftOffset(2, -1)
    got = shift_images(arr, off)
    s = ImageShape(3, 4)
    for c in range(2):
        flat = arr[c].reshape(12, 5)
        assert np.array_equal(got[c].reshape(12, 5), circular_shift(flat, s, off))


def test_image_shape_validation():
    with pytest.raises(DimensionError):
        ImageShape(0, 3)
    assert ImageShape(28, 28).n == 784


def test_channel_tensor_validation():
    s = ImageShape(2, 2)
    with pytest.raises(DimensionError):
        ChannelTensor(s, np.zeros((1, 3, 1)))
    with pytest.raises(ValueError):
        ChannelTensor(s, np.full((1, 4, 1), np.nan))
    t = ChannelTensor(s, np.arange(8.0).reshape(1, 4, 2))
    assert t.channels == 1 and t.batch == 2
    assert t.images.shape == (1, 2, 2, 2)
    with pytest.raises(ValueError):
        t.values[0, 0, 0] = 1.0


def test_channel_tensor_images_roundtrip():
    arr = np.random.default_rng(2).standard_normal((3, 4, 5, 2))
    t = ChannelTensor.from_images(arr)
    assert t.shape == ImageShape(4, 5)
    assert np.array_equal(t.images, arr)
    # row-major: pixel (row, col) at row * W + col
    assert t.values[1, 2 * 5 + 3, 1] == arr[1, 2, 3, 1]
