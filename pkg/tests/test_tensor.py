import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from layerlat.errors import DimensionError
from layerlat.tensor import (elementwise, matmul, maxpool_downsample, nearest_resize, paste_region,
                             permute, reshape, slice_region, softmax_lastdim)

finite = st.floats(-10, 10, width=32)


def loop_matmul(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m), dtype=np.float32)
    for i in range(n):
        for j in range(m):
            acc = np.float32(a[i, 0] * b[0, j])
            for p in range(1, k):
                acc = np.float32(acc + np.float32(a[i, p] * b[p, j]))
            out[i, j] = acc
    return out


@given(st.integers(1, 5), st.integers(1, 6), st.integers(1, 5), st.data())
def test_matmul_matches_loop_bitwise(n, k, m, data):
    a = data.draw(arrays(np.float32, (n, k), elements=finite))
    b = data.draw(arrays(np.float32, (k, m), elements=finite))
    np.testing.assert_array_equal(matmul(a, b), loop_matmul(a, b))


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


@given(arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 8)), elements=st.floats(-80, 80, width=32)))
def test_softmax_rows_sum_to_one(x):
    y = softmax_lastdim(x)
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-5)


def test_softmax_stable_for_large_logits():
    y = softmax_lastdim(np.array([[1e4, 1e4 - 1, -1e4]], dtype=np.float32))
    assert np.all(np.isfinite(y))
    np.testing.assert_allclose(y[0, :2], [1 / (1 + np.exp(-1)), np.exp(-1) / (1 + np.exp(-1))], rtol=1e-5)


def test_elementwise_mask_broadcast_only():
    x = np.ones((3, 4, 5), dtype=np.float32)
    m = np.zeros((4, 5), dtype=np.float32)
    m[1, 2] = 1
    out = elementwise(x, m, "mul")
    assert out.shape == (3, 4, 5) and out.sum() == 3
    with pytest.raises(DimensionError):
        elementwise(x, np.ones((2, 4, 5)), "add")
    with pytest.raises(DimensionError):
        elementwise(x, np.ones(5), "add")


def test_reshape_and_permute():
    a = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    assert reshape(a, (6, 4)).shape == (6, 4)
    with pytest.raises(DimensionError):
        reshape(a, (5, 5))
    np.testing.assert_array_equal(permute(a, (2, 0, 1)), a.transpose(2, 0, 1))


@given(st.integers(-6, 6), st.integers(-6, 6))
def test_paste_then_slice_recovers(top, left):
    dst = np.zeros((2, 8, 8), dtype=np.float32)
    src = np.arange(2 * 3 * 4, dtype=np.float32).reshape(2, 3, 4) + 1
    out = paste_region(dst, src, top, left)
    back = slice_region(out, top, left, 3, 4)
    # visible part matches; cropped part reads 0
    ys = np.arange(3)[:, None] + top
    xs = np.arange(4)[None, :] + left
    inside = (ys >= 0) & (ys < 8) & (xs >= 0) & (xs < 8)
    np.testing.assert_array_equal(back, np.where(inside, src, 0))


def test_nearest_resize_floor_rule():
    x = np.arange(4, dtype=np.float32).reshape(1, 4)
    np.testing.assert_array_equal(nearest_resize(x, 1, 8), [[0, 0, 1, 1, 2, 2, 3, 3]])
    np.testing.assert_array_equal(nearest_resize(x, 1, 2), [[0, 2]])


@given(st.integers(1, 20), st.integers(1, 20), st.integers(1, 20), st.integers(1, 20), st.data())
def test_maxpool_never_loses_coverage(h, w, nh, nw, data):
    mask = data.draw(arrays(np.float32, (h, w), elements=st.sampled_from([0.0, 1.0])))
    small = maxpool_downsample(mask, nh, nw)
    up = nearest_resize(small, h, w)
    assert np.all(up >= mask)
    assert small.max() == mask.max()


def test_maxpool_exact_on_aligned_blocks():
    mask = np.zeros((8, 8), dtype=np.float32)
    mask[5, 2] = 1
    small = maxpool_downsample(mask, 2, 2)
    np.testing.assert_array_equal(small, [[0, 0], [1, 0]])
