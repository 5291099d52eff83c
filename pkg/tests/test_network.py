import numpy as np
import pytest

from tilestream.errors import ShapeError
from tilestream.layers import bce_with_logits, DenseParams
from tilestream.network import (
    Conv,
    Dense,
    Flatten,
    MaxPool,
    NetworkSpec,
    Relu,
    clone_params,
    head_backward,
    head_forward,
    init_params,
    net_giga64mp,
    net_tiny2,
    net_vgg13,
    run_stack,
)


def small_net():
    return NetworkSpec(1, (Conv(2, 3, 1, 1), Relu(), MaxPool(2, 2),
                           Flatten(), Dense(4), Relu(), Dense(1)), 3)


def test_validation_rules():
    with pytest.raises(ShapeError):  # dense in streaming section
        NetworkSpec(1, (Dense(3), Flatten(), Dense(1)), 1)
    with pytest.raises(ShapeError):  # dense before flatten
        NetworkSpec(1, (Conv(2), Dense(1)), 1)
    with pytest.raises(ShapeError):  # must end in width-1 dense
        NetworkSpec(1, (Conv(2), Flatten(), Dense(3)), 1)
    with pytest.raises(ShapeError):  # double flatten
        NetworkSpec(1, (Conv(2), Flatten(), Flatten(), Dense(1)), 1)
    with pytest.raises(ShapeError):  # split out of range
        NetworkSpec(1, (Conv(2), Flatten(), Dense(1)), 0)


def test_activation_shapes():
    net = small_net()
    shapes = net.activation_shapes(8)
    assert shapes[0] == ("map", 1, 8, 8)
    assert shapes[1] == ("map", 2, 8, 8)
    assert shapes[3] == ("map", 2, 4, 4)
    assert shapes[4] == ("vec", 32)
    assert shapes[-1] == ("vec", 1)
    assert net.split_shape(8) == (2, 4, 4)


def test_init_params_deterministic_and_fan_in():
    net = small_net()
    a = init_params(net, 8, seed=7)
    b = init_params(net, 8, seed=7)
    c = init_params(net, 8, seed=8)
    for pa, pb in zip(a, b):
        if pa is not None:
            assert np.array_equal(pa.w, pb.w) and np.array_equal(pa.b, pb.b)
    assert any(pa is not None and not np.array_equal(pa.w, pc.w)
               for pa, pc in zip(a, c) if pa is not None)
    bound = 1.0 / np.sqrt(1 * 9)
    assert np.abs(a[0].w).max() <= bound
    assert np.all(a[0].b == 0)


def test_single_init_is_cast_of_double():
    net = small_net()
    d = init_params(net, 8, seed=3, precision="double")
    s = init_params(net, 8, seed=3, precision="single")
    assert s[0].w.dtype == np.float32
    assert np.array_equal(s[0].w, d[0].w.astype(np.float32))


def test_head_zero_weights_logit_is_bias(rng):
    net = small_net()
    params = init_params(net, 8, seed=0)
    for p in params:
        if p is not None:
            p.w[...] = 0.0
    params[-1].b[...] = 0.625
    split, _ = run_stack(rng.standard_normal((1, 1, 8, 8)), net, params, 0, 3)
    logit, _ = head_forward(split, net, params)
    assert logit[0] == 0.625


def test_head_backward_fd(rng):
    """Finite differences through a 2-dense head w.r.t. the feature map."""
    net = small_net()
    params = init_params(net, 8, seed=1)
    feats = rng.standard_normal((1, 2, 4, 4))

    def loss():
        logit, _ = head_forward(feats, net, params)
        return float(bce_with_logits(logit[0], 1)[0])

    logit, caches = head_forward(feats, net, params)
    _, dlogit = bce_with_logits(logit[0], 1)
    gmap, _ = head_backward(np.asarray([dlogit]), net, params, caches, feats.shape)
    eps, worst = 1e-5, 0.0
    for idx in range(feats.size):
        orig = feats.flat[idx]
        feats.flat[idx] = orig + eps
        hi = loss()
        feats.flat[idx] = orig - eps
        lo = loss()
        feats.flat[idx] = orig
        fd = (hi - lo) / (2 * eps)
        worst = max(worst, abs(fd - gmap.flat[idx]) / max(abs(fd), abs(gmap.flat[idx]), 1e-8))
    assert worst <= 1e-6


def test_relu_inplace_never_mutates_stack_input(rng):
    net = NetworkSpec(1, (Relu(), Conv(1, 1, 1, 0), Flatten(), Dense(1)), 2)
    params = init_params(net, 4, seed=0)
    x = rng.standard_normal((1, 1, 4, 4))
    keep = x.copy()
    run_stack(x, net, params, 0, 2, protect_input=True)
    assert np.array_equal(x, keep)


def test_presets_build():
    assert net_vgg13().split_index == 30
    assert len([l for l in net_vgg13().stream_layers if isinstance(l, Conv)]) == 13
    assert net_tiny2().split_shape(256) == (16, 64, 64)
    assert net_giga64mp().split_shape(8130)[1:] == (508, 508)


def test_clone_params_is_deep(rng):
    net = small_net()
    p = init_params(net, 8, seed=0)
    q = clone_params(p)
    q[0].w += 1.0
    assert not np.array_equal(p[0].w, q[0].w)
