import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import random_case

from lisfguard.tensor_net import (ConstantLoss, Conv, FullyConnected, GlobalAvgPool, LogitLoss, MaxPool, Network,
                                  ReLU, ShapeError, apply_layer, forward, forward_range, grad_wrt_input, predict,
                                  random_network)


def _naive_conv(x, w, b, s, p):
    c, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    o, _, k, _ = w.shape
    ho, wo = (h + 2 * p - k) // s + 1, (wd + 2 * p - k) // s + 1
    out = np.zeros((o, ho, wo))
    for oc in range(o):
        for i in range(ho):
            for j in range(wo):
                out[oc, i, j] = np.sum(xp[:, i * s:i * s + k, j * s:j * s + k] * w[oc]) + b[oc]
    return out


def test_identity_conv():
    x = np.random.default_rng(0).random((1, 6, 7)).astype(np.float32)
    conv = Conv(1, 1, 1, 1, 0, np.ones((1, 1, 1, 1), np.float32), np.zeros(1, np.float32))
    assert np.array_equal(apply_layer(conv, x), x)


def test_relu_values():
    out = apply_layer(ReLU(), np.array([[[-1.0, 0.0, 2.0]]], np.float32))
    assert out.tolist() == [[[0.0, 0.0, 2.0]]]


def test_all_ones_conv_gives_nines():
    conv = Conv(1, 1, 3, 1, 0, np.ones((1, 1, 3, 3), np.float32), np.zeros(1, np.float32))
    out = apply_layer(conv, np.ones((1, 5, 5), np.float32))
    assert out.shape == (1, 3, 3) and np.all(out == 9)


@pytest.mark.parametrize("k,s,p", [(1, 1, 0), (3, 1, 1), (3, 2, 0), (5, 2, 2), (2, 3, 1)])
def test_conv_matches_naive_loops(k, s, p):
    rng = np.random.default_rng(k * 10 + s)
    x = rng.normal(size=(2, 11, 9)).astype(np.float32)
    w = rng.normal(size=(3, 2, k, k)).astype(np.float32)
    b = rng.normal(size=3).astype(np.float32)
    got = apply_layer(Conv(2, 3, k, s, p, w, b), x)
    np.testing.assert_allclose(got, _naive_conv(x, w, b, s, p), rtol=1e-5, atol=1e-5)


def test_maxpool_and_gap():
    x = np.arange(16, dtype=np.float32).reshape(1, 4, 4)
    assert apply_layer(MaxPool(2, 2), x)[0].tolist() == [[5, 7], [13, 15]]
    assert apply_layer(GlobalAvgPool(), x).tolist() == [7.5]


def test_forward_range_full_and_empty(rng):
    net, x, _ = random_case(rng)
    n = len(net.layers)
    assert np.array_equal(forward_range(net, x, 0, n), forward(net, x).logits)
    assert forward_range(net, x, 0, 0) is not None
    assert np.array_equal(forward_range(net, x, 0, 0), x)
    assert predict(net, x) == forward(net, x).label


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_prefix_suffix_composition(seed):
    rng = np.random.default_rng(seed)
    net, x, _ = random_case(rng)
    n = len(net.layers)
    full = forward(net, x).logits
    for q in range(n + 1):
        mid = forward_range(net, x, 0, q)
        assert np.array_equal(forward_range(net, mid, q, n), full)


def test_forward_is_deterministic_and_pure(rng):
    net, x, _ = random_case(rng)
    before = x.copy()
    a, b = forward(net, x), forward(net, x)
    assert np.array_equal(x, before)
    assert all(np.array_equal(u, v) for u, v in zip(a.outputs, b.outputs))


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 5), st.integers(1, 3), st.integers(0, 2), st.integers(0, 10**6))
def test_conv_footprint_matches_probe(k, s, p, seed):
    p = min(p, k - 1)
    rng = np.random.default_rng(seed)
    net = random_network(rng, (1, 12, 12), [("conv", 2, k, s, p)], 2)
    x = rng.normal(size=(1, 12, 12)).astype(np.float32)
    r, c = int(rng.integers(0, 12)), int(rng.integers(0, 12))
    y = x.copy()
    y[0, r, c] += 3.0
    changed = np.any(forward_range(net, x, 0, 1) != forward_range(net, y, 0, 1), axis=0)
    oh, ow = changed.shape
    for i in range(oh):
        for j in range(ow):
            inside = i * s - p <= r <= i * s - p + k - 1 and j * s - p <= c <= j * s - p + k - 1
            if changed[i, j]:
                assert inside


def test_linear_gradient_is_weight_row():
    rng = np.random.default_rng(3)
    w = rng.normal(size=(4, 12)).astype(np.float32)
    net = Network([FullyConnected(12, 4, w, np.zeros(4, np.float32))], (3, 2, 2), 4)
    g = grad_wrt_input(net, rng.random((3, 2, 2)).astype(np.float32), LogitLoss(2))
    assert np.array_equal(g.reshape(-1), w[2])


def test_constant_loss_gradient_is_zero(rng):
    net, x, _ = random_case(rng)
    assert not np.any(grad_wrt_input(net, x, ConstantLoss(1.0)))


def test_shape_and_nan_errors(rng):
    net, x, _ = random_case(rng)
    with pytest.raises(ShapeError):
        forward(net, x[:, :-1])
    bad = x.copy()
    bad.flat[0] = np.nan
    with pytest.raises(ValueError):
        grad_wrt_input(net, bad, ConstantLoss())
    with pytest.raises(ShapeError):
        Network([Conv(2, 1, 3, 1, 0)], (3, 8, 8), 1)


def test_float64_network_keeps_dtype(rng):
    net, x, _ = random_case(rng)
    net64 = net.astype(np.float64)
    assert forward(net64, x.astype(np.float64)).logits.dtype == np.float64
