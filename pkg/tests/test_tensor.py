import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cconv import tensor as T
from conftest import naive_conv2d


def test_conv_all_ones():
    x = np.ones((1, 1, 3, 3), np.float32)
    w = T.ConvWeights(np.ones((1, 1, 3, 3), np.float32))
    assert T.conv2d(x, w).shape == (1, 1, 1, 1)
    assert T.conv2d(x, w)[0, 0, 0, 0] == 9.0


def test_conv_identity_kernel(rng):
    x = rng.standard_normal((2, 1, 5, 4)).astype(np.float32)
    w = T.ConvWeights(np.ones((1, 1, 1, 1), np.float32))
    np.testing.assert_array_equal(T.conv2d(x, w), x)


def test_conv_matches_direct_summation(rng):
    for trial in range(50):
        n = rng.integers(1, 3)
        ci, co = rng.integers(1, 5, size=2)
        h, wd = rng.integers(3, 9, size=2)
        k = int(rng.choice([1, 3]))
        pad = int(rng.integers(0, 2))
        x = rng.standard_normal((n, ci, h, wd)).astype(np.float32)
        w = rng.standard_normal((co, ci, k, k)).astype(np.float32)
        b = rng.standard_normal(co).astype(np.float32)
        got = T.conv2d(x, T.ConvWeights(w, 1, pad), b)
        np.testing.assert_allclose(got, naive_conv2d(x, w, b, 1, pad), atol=1e-5, rtol=0)


def test_conv_stride_matches_direct_summation(rng):
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((2, 3, 3, 3))
    got = T.conv2d(x, T.ConvWeights(w, 2, 1))
    np.testing.assert_allclose(got, naive_conv2d(x, w, None, 2, 1), atol=1e-12)


def test_conv_errors():
    w = T.ConvWeights(np.ones((1, 2, 3, 3), np.float32))
    with pytest.raises(T.ShapeError, match=r"\(1, 3, 4, 4\).*\(1, 2, 3, 3\)"):
        T.conv2d(np.ones((1, 3, 4, 4), np.float32), w)
    with pytest.raises(T.ShapeError):
        T.conv2d(np.ones((1, 2, 2, 2), np.float32), w)
    with pytest.raises(T.NonFiniteError), np.errstate(over="ignore"):
        T.conv2d(np.full((1, 2, 3, 3), 3e38, np.float32), w)


def test_conv_linearity_and_weight_distributivity(rng):
    x1, x2 = rng.standard_normal((2, 2, 3, 6, 6)).astype(np.float32)
    w1, w2 = rng.standard_normal((2, 4, 3, 3, 3)).astype(np.float32)
    cw = lambda w: T.ConvWeights(w, 1, 1)
    a, b = 0.7, -1.3
    lhs = T.conv2d((a * x1 + b * x2).astype(np.float32), cw(w1))
    np.testing.assert_allclose(lhs, a * T.conv2d(x1, cw(w1)) + b * T.conv2d(x2, cw(w1)), atol=1e-4)
    np.testing.assert_allclose(T.conv2d(x1, cw(w1 + w2)), T.conv2d(x1, cw(w1)) + T.conv2d(x1, cw(w2)), atol=1e-4)


def test_conv_batch_order_independent(rng):
    x = rng.standard_normal((4, 2, 5, 5)).astype(np.float32)
    w = T.ConvWeights(rng.standard_normal((3, 2, 3, 3)).astype(np.float32), 1, 1)
    perm = np.array([2, 0, 3, 1])
    np.testing.assert_array_equal(T.conv2d(x, w)[perm], T.conv2d(x[perm], w))


def test_kernels_bit_identical_on_repeat(rng):
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    w = T.ConvWeights(rng.standard_normal((4, 3, 3, 3)).astype(np.float32), 1, 1)
    assert T.conv2d(x, w).tobytes() == T.conv2d(x.copy(), w).tobytes()
    g = rng.standard_normal((2, 4, 8, 8)).astype(np.float32)
    r1, r2 = T.conv2d_backward(g, x, w), T.conv2d_backward(g, x, w)
    assert all(a.tobytes() == b.tobytes() for a, b in zip(r1, r2))


def test_matmul():
    a = np.arange(12, dtype=np.float32).reshape(3, 4)
    np.testing.assert_array_equal(T.matmul(np.eye(3, dtype=np.float32), a), a)
    np.testing.assert_array_equal(T.matmul(np.array([[1., 2.], [3., 4.]]), np.array([[1.], [1.]])), [[3.], [7.]])
    with pytest.raises(T.ShapeError):
        T.matmul(a, a)


def test_matmul_triple_loop(rng):
    a, b = rng.standard_normal((5, 4)), rng.standard_normal((4, 3))
    oracle = np.zeros((5, 3))
    for i in range(5):
        for j in range(3):
            for k in range(4):
                oracle[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(T.matmul(a, b), oracle, atol=1e-6)


def test_pool_and_upsample():
    np.testing.assert_array_equal(T.avg_pool2(np.ones((1, 1, 2, 2), np.float32)), [[[[1.0]]]])
    np.testing.assert_array_equal(T.upsample_nearest2(np.full((1, 1, 1, 1), 5.0)), np.full((1, 1, 2, 2), 5.0))
    with pytest.raises(T.ShapeError):
        T.avg_pool2(np.ones((1, 1, 3, 2), np.float32))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_pool_upsample_round_trip(n, c, h, w, seed):
    x = np.random.default_rng(seed).standard_normal((n, c, h, w)).astype(np.float32)
    np.testing.assert_array_equal(T.avg_pool2(T.upsample_nearest2(x)), x)


def test_batch_moments():
    mu, sigma = T.batch_moments(np.full((2, 3, 2, 2), 4.5))
    np.testing.assert_array_equal(mu, 4.5)
    np.testing.assert_array_equal(sigma, 0.0)
    mu, sigma = T.batch_moments(np.array([1.0, 3.0]).reshape(2, 1, 1, 1))
    assert mu[0] == 2.0 and sigma[0] == 1.0
    with pytest.raises(T.ShapeError):
        T.batch_moments(np.ones((1, 2, 1, 1)))


def test_batch_moments_two_pass(rng):
    x = rng.standard_normal((3, 4, 5, 6)) * 3 + 1
    mu, sigma = T.batch_moments(x)
    for c in range(4):
        vals = x[:, c].ravel()
        m = sum(vals) / len(vals)
        v = sum((t - m) ** 2 for t in vals) / len(vals)
        assert abs(mu[c] - m) <= 1e-6 and abs(sigma[c] - v ** 0.5) <= 1e-6


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_serialization_round_trip(rng, dtype):
    t = rng.standard_normal((2, 3, 4)).astype(dtype)
    buf = io.BytesIO()
    T.write_tensor(buf, t)
    raw = buf.getvalue()
    assert raw[:4] == b"CCT1" and raw[4] == 3
    assert raw[5:17] == np.array([2, 3, 4], "<u4").tobytes()
    assert raw[17] == (0 if dtype == np.float32 else 1)
    buf.seek(0)
    back = T.read_tensor(buf)
    assert back.dtype == dtype
    np.testing.assert_array_equal(back, t)


def test_tensor_constructor():
    assert T.tensor([1, 2]).dtype == np.float32
    with pytest.raises(T.ShapeError):
        T.tensor(np.ones((1, 1, 1, 1, 1)))
