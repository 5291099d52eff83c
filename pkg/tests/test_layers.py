import math

import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from tilestream.errors import NonFiniteError, ShapeError
from tilestream.layers import (
    ConvParams,
    ConvSpec,
    bce_with_logits,
    conv2d_backward,
    conv2d_forward,
    dense_backward,
    dense_forward,
    DenseParams,
    maxpool2d_backward,
    maxpool2d_forward,
    out_size,
    relu_backward,
    relu_forward,
)


def brute_conv(x, w, b, stride, pad):
    """Independent oracle: direct python-loop convolution."""
    n, ci, h, ww = x.shape
    co, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - k) // stride + 1
    ow = (ww + 2 * pad - k) // stride + 1
    out = np.zeros((n, co, oh, ow), dtype=x.dtype)
    for ni in range(n):
        for o in range(co):
            for oy in range(oh):
                for ox in range(ow):
                    acc = 0.0
                    for c in range(ci):
                        for ky in range(k):
                            for kx in range(k):
                                acc += w[o, c, ky, kx] * xp[ni, c, oy * stride + ky, ox * stride + kx]
                    out[ni, o, oy, ox] = acc + b[o]
    return out


def fd_scalar(fn, arr, idx, eps=1e-5):
    orig = arr.flat[idx]
    arr.flat[idx] = orig + eps
    hi = fn()
    arr.flat[idx] = orig - eps
    lo = fn()
    arr.flat[idx] = orig
    return (hi - lo) / (2 * eps)


# --- conv2d_forward ------------------------------------------------------

def test_conv_all_ones_3x3():
    x = np.ones((1, 1, 3, 3))
    p = ConvParams(np.ones((1, 1, 3, 3)), np.zeros(1))
    y = conv2d_forward(x, ConvSpec(3, 1, 0, 1, 1), p)
    assert y.shape == (1, 1, 1, 1) and y[0, 0, 0, 0] == 9.0


def test_conv_identity_kernel_exact(rng):
    x = rng.standard_normal((2, 3, 6, 6))
    w = np.zeros((3, 3, 1, 1))
    for c in range(3):
        w[c, c, 0, 0] = 1.0
    y = conv2d_forward(x, ConvSpec(1, 1, 0, 3, 3), ConvParams(w, np.zeros(3)))
    assert np.array_equal(y, x)


def test_conv_2x2_stride2_blocks():
    x = np.arange(1, 17, dtype=np.float64).reshape(1, 1, 4, 4)
    p = ConvParams(np.ones((1, 1, 2, 2)), np.zeros(1))
    y = conv2d_forward(x, ConvSpec(2, 2, 0, 1, 1), p)
    assert np.array_equal(y[0, 0], [[14.0, 22.0], [46.0, 54.0]])
    assert np.array_equal(y, brute_conv(x, p.w, p.b, 2, 0))


def test_conv_matches_bruteforce(rng):
    for k, s, pad in [(3, 1, 1), (2, 2, 0), (5, 2, 1), (1, 1, 0)]:
        x = rng.standard_normal((1, 2, 9, 9))
        w = rng.standard_normal((3, 2, k, k))
        b = rng.standard_normal(3)
        spec = ConvSpec(k, s, pad, 2, 3)
        got = conv2d_forward(x, spec, ConvParams(w, b))
        want = brute_conv(x, w, b, s, pad)
        assert np.allclose(got, want, rtol=1e-12, atol=1e-12)


def test_conv_errors(rng):
    x = rng.standard_normal((1, 2, 4, 4))
    p = ConvParams(np.zeros((1, 3, 3, 3)), np.zeros(1))
    with pytest.raises(ShapeError):
        conv2d_forward(x, ConvSpec(3, 1, 0, 3, 1), p)  # channel mismatch
    with pytest.raises(ShapeError):
        conv2d_forward(x[:, :1], ConvSpec(5, 1, 0, 1, 1),
                       ConvParams(np.zeros((1, 1, 5, 5)), np.zeros(1)))  # kernel > input
    with pytest.raises(ShapeError):
        ConvSpec(3, 1, 3, 1, 1)  # pad >= kernel
    with pytest.raises(NonFiniteError):
        bad = x[:, :1].copy()
        bad[0, 0, 0, 0] = np.nan
        conv2d_forward(bad, ConvSpec(3, 1, 0, 1, 1),
                       ConvParams(np.ones((1, 1, 3, 3)), np.zeros(1)))


def test_conv_mixed_dtype_rejected(rng):
    x = rng.standard_normal((1, 1, 4, 4)).astype(np.float32)
    p = ConvParams(np.ones((1, 1, 3, 3)), np.zeros(1))
    with pytest.raises(ShapeError):
        conv2d_forward(x, ConvSpec(3, 1, 0, 1, 1), p)


# --- conv2d_backward -----------------------------------------------------

def test_conv_backward_identity_kernel(rng):
    x = rng.standard_normal((1, 1, 5, 5))
    spec = ConvSpec(1, 1, 0, 1, 1)
    p = ConvParams(np.ones((1, 1, 1, 1)), np.zeros(1))
    gy = rng.standard_normal((1, 1, 5, 5))
    gx, gw, gb = conv2d_backward(x, spec, p, gy)
    assert np.array_equal(gx, gy)


def test_conv_backward_unit_example():
    x = np.ones((1, 1, 3, 3))
    spec = ConvSpec(3, 1, 0, 1, 1)
    p = ConvParams(np.ones((1, 1, 3, 3)), np.zeros(1))
    gy = np.ones((1, 1, 1, 1))
    _, gw, gb = conv2d_backward(x, spec, p, gy)
    assert np.array_equal(gw, np.ones((1, 1, 3, 3)))
    assert np.array_equal(gb, np.ones(1))


@pytest.mark.parametrize("k,s,pad", [(3, 1, 0), (1, 1, 0), (2, 2, 0), (3, 2, 1)])
def test_conv_backward_finite_differences(rng, k, s, pad):
    x = rng.standard_normal((1, 2, 7, 7))
    w = rng.standard_normal((2, 2, k, k))
    b = rng.standard_normal(2)
    spec = ConvSpec(k, s, pad, 2, 2)
    proj = None

    def loss():
        out = conv2d_forward(x, spec, ConvParams(w, b))
        return float((out * proj).sum())

    out0 = conv2d_forward(x, spec, ConvParams(w, b))
    proj = np.random.default_rng(0).standard_normal(out0.shape)
    gx, gw, gb = conv2d_backward(x, spec, ConvParams(w, b), proj.astype(x.dtype))
    worst = 0.0
    for arr, grad in ((x, gx), (w, gw), (b, gb)):
        for idx in range(0, arr.size, max(1, arr.size // 40)):
            fd = fd_scalar(loss, arr, idx)
            denom = max(abs(fd), abs(grad.flat[idx]), 1e-8)
            worst = max(worst, abs(fd - grad.flat[idx]) / denom)
    assert worst <= 1e-6


def test_conv_linearity(rng):
    x = rng.standard_normal((1, 2, 6, 6))
    w = rng.standard_normal((2, 2, 3, 3))
    spec = ConvSpec(3, 1, 1, 2, 2)
    a = 3.7
    y1 = conv2d_forward(a * x, spec, ConvParams(w, np.zeros(2)))
    y2 = a * conv2d_forward(x, spec, ConvParams(w, np.zeros(2)))
    assert np.allclose(y1, y2, rtol=1e-14, atol=1e-14)


# --- maxpool -------------------------------------------------------------

def test_maxpool_basic():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    y, arg = maxpool2d_forward(x, 2, 2)
    assert y[0, 0, 0, 0] == 4.0 and arg[0, 0, 0, 0] == 3


def test_maxpool_tie_first_occurrence():
    x = np.full((1, 1, 4, 4), 2.5)
    y, arg = maxpool2d_forward(x, 2, 2)
    assert np.all(y == 2.5)
    assert np.array_equal(arg[0, 0], [[0, 2], [8, 10]])  # top-left of each window


def test_maxpool_5x5_drops_edges(rng):
    x = rng.standard_normal((1, 1, 5, 5))
    y, arg = maxpool2d_forward(x, 2, 2)
    assert y.shape == (1, 1, 2, 2)
    assert out_size(5, 2, 2) == 2
    # bottom row / right col never referenced
    assert all(idx % 5 != 4 and idx // 5 != 4 for idx in arg.ravel())


def test_maxpool_backward_routes():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    _, arg = maxpool2d_forward(x, 2, 2)
    gx = maxpool2d_backward(arg, np.ones((1, 1, 1, 1)), (2, 2))
    assert np.array_equal(gx[0, 0], [[0.0, 0.0], [0.0, 1.0]])
    assert np.array_equal(maxpool2d_backward(arg, np.zeros((1, 1, 1, 1)), (2, 2)),
                          np.zeros((1, 1, 2, 2)))


def test_maxpool_grad_conservation(rng):
    x = rng.standard_normal((1, 2, 8, 8))
    _, arg = maxpool2d_forward(x, 2, 2)
    gy = rng.standard_normal(arg.shape)
    gx = maxpool2d_backward(arg, gy, (8, 8))
    # non-overlapping windows: scatter is a permutation, sums exactly equal
    assert math.fsum(gx.ravel()) == math.fsum(gy.ravel())


def test_maxpool_overlapping_conservation(rng):
    x = rng.standard_normal((1, 1, 8, 8))
    _, arg = maxpool2d_forward(x, 3, 2)
    gy = rng.standard_normal(arg.shape)
    gx = maxpool2d_backward(arg, gy, (8, 8))
    assert abs(math.fsum(gx.ravel()) - math.fsum(gy.ravel())) < 1e-12


def test_maxpool_stale_argmax(rng):
    x = rng.standard_normal((1, 1, 6, 6))
    _, arg = maxpool2d_forward(x, 2, 2)
    with pytest.raises(ShapeError):
        maxpool2d_backward(arg, np.ones(arg.shape), (2, 2))


# --- relu ----------------------------------------------------------------

def test_relu_values():
    x = np.array([-1.0, 0.0, 2.0]).reshape(1, 1, 1, 3)
    out = relu_forward(x.copy())
    assert np.array_equal(out.ravel(), [0.0, 0.0, 2.0])
    g = relu_backward(out, np.full_like(out, 5.0))
    assert np.array_equal(g.ravel(), [0.0, 0.0, 5.0])  # gradient at 0 is 0


def test_relu_finite_differences(rng):
    x = rng.standard_normal((1, 1, 4, 4)) + 0.5
    x[np.abs(x) < 0.05] = 0.3  # keep away from the kink
    proj = rng.standard_normal(x.shape)

    def loss():
        return float((relu_forward(x.copy()) * proj).sum())

    out = relu_forward(x.copy())
    g = relu_backward(out, proj)
    for idx in range(x.size):
        fd = fd_scalar(loss, x, idx)
        assert abs(fd - g.flat[idx]) <= 1e-6 * max(1.0, abs(fd))


# --- dense / flatten -----------------------------------------------------

def test_dense_zero_weights_is_bias(rng):
    x = rng.standard_normal((1, 7))
    p = DenseParams(np.zeros((1, 7)), np.array([0.37]))
    assert dense_forward(x, p)[0, 0] == 0.37


def test_dense_one_hot_selects_feature(rng):
    x = rng.standard_normal((1, 5))
    w = np.zeros((1, 5))
    w[0, 3] = 1.0
    assert dense_forward(x, DenseParams(w, np.zeros(1)))[0, 0] == x[0, 3]


def test_dense_backward_fd(rng):
    x = rng.standard_normal((2, 6))
    w = rng.standard_normal((3, 6))
    b = rng.standard_normal(3)
    proj = rng.standard_normal((2, 3))

    def loss():
        return float((dense_forward(x, DenseParams(w, b)) * proj).sum())

    gx, gw, gb = dense_backward(x, DenseParams(w, b), proj)
    for arr, grad in ((x, gx), (w, gw), (b, gb)):
        for idx in range(arr.size):
            fd = fd_scalar(loss, arr, idx)
            assert abs(fd - grad.flat[idx]) <= 1e-6 * max(1.0, abs(fd))


# --- bce -----------------------------------------------------------------

def test_bce_at_zero():
    loss, grad = bce_with_logits(np.float64(0.0), 1)
    assert loss == pytest.approx(math.log(2), rel=1e-12)
    assert grad == -0.5


def test_bce_saturates():
    loss, _ = bce_with_logits(np.float64(40.0), 1)
    assert 0 <= loss < 1e-15


def test_bce_fd():
    x = np.float64(0.3)
    loss0, grad = bce_with_logits(x, 0)
    eps = 1e-6
    hi, _ = bce_with_logits(x + eps, 0)
    lo, _ = bce_with_logits(x - eps, 0)
    fd = (hi - lo) / (2 * eps)
    assert abs(fd - grad) / abs(grad) <= 1e-8


def test_bce_label_domain():
    with pytest.raises(ShapeError):
        bce_with_logits(np.float64(0.0), 2)


# --- properties ----------------------------------------------------------

@settings(max_examples=60, deadline=None)
@given(z=st.integers(1, 40), k=st.integers(1, 7), s=st.integers(1, 3), p=st.integers(0, 6))
def test_shape_law(z, k, s, p):
    if p >= k or z + 2 * p < k:
        return
    x = np.zeros((1, 1, z, z))
    spec = ConvSpec(k, s, p, 1, 1)
    y = conv2d_forward(x, spec, ConvParams(np.zeros((1, 1, k, k)), np.zeros(1)))
    expect = (z + 2 * p - k) // s + 1
    assert y.shape == (1, 1, expect, expect)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), k=st.sampled_from([1, 2, 3, 5]),
       s=st.sampled_from([1, 2]))
def test_per_pixel_determinism(seed, k, s):
    """Cropping any receptive field reproduces the output pixel bit-exactly."""
    r = np.random.default_rng(seed)
    z = int(r.integers(k + s + 2, 20))
    x = r.standard_normal((1, 2, z, z))
    w = r.standard_normal((3, 2, k, k))
    b = r.standard_normal(3)
    spec = ConvSpec(k, s, 0, 2, 3)
    full = conv2d_forward(x, spec, ConvParams(w, b))
    oh = full.shape[2]
    oy, ox = int(r.integers(0, oh)), int(r.integers(0, oh))
    crop = x[:, :, oy * s: oy * s + k, ox * s: ox * s + k]
    one = conv2d_forward(crop, spec, ConvParams(w, b))
    assert one[0, :, 0, 0].tobytes() == full[0, :, oy, ox].tobytes()
