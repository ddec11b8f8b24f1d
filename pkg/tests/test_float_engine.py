import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from intnet.float_engine import batchnorm_f32, brelu_f32, conv2d_f32, forward_f32
from intnet.network import ADD, BRELU, CONV, INPUT, BatchNorm, Layer, Network
from oracles import naive_conv_f64


def test_ones_conv_is_nine():
    out = conv2d_f32(np.ones((1, 1, 3, 3), np.float32), np.ones((1, 1, 3, 3), np.float32), np.zeros(1))
    assert out.shape == (1, 1, 1, 1) and out[0, 0, 0, 0] == 9.0


def test_identity_kernel(rng):
    x = rng.standard_normal((2, 1, 5, 5)).astype(np.float32)
    out = conv2d_f32(x, np.ones((1, 1, 1, 1), np.float32), np.zeros(1))
    assert np.array_equal(out, x)


def test_random_against_naive_oracle(rng):
    x = rng.standard_normal((1, 2, 5, 5)).astype(np.float32)
    w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
    b = rng.standard_normal(3).astype(np.float32)
    out = conv2d_f32(x, w, b, pad=1)
    assert np.allclose(out[0], naive_conv_f64(x[0], w, b, pad=1), rtol=1e-6, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 8), st.integers(1, 8), st.sampled_from([1, 3, 5]),
       st.integers(5, 9), st.integers(1, 2), st.integers(0, 2))
def test_oracle_property(seed, c, o, k, size, stride, pad):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((c, size, size)).astype(np.float32)
    w = rng.standard_normal((o, c, k, k)).astype(np.float32)
    out = conv2d_f32(x, w, None, stride, pad)[0]
    ref = naive_conv_f64(x, w, None, stride, pad)
    assert np.allclose(out, ref, rtol=1e-5, atol=1e-5)


def test_conv_shape_errors():
    with pytest.raises(ValueError):
        conv2d_f32(np.ones((1, 2, 4, 4)), np.ones((1, 1, 3, 3)))
    with pytest.raises(ValueError):
        conv2d_f32(np.ones((1, 1, 4, 4)), np.ones((1, 1, 3, 3)), stride=0)
    with pytest.raises(ValueError):
        conv2d_f32(np.ones((1, 1, 2, 2)), np.ones((1, 1, 3, 3)))


def test_brelu_examples():
    assert brelu_f32(np.array([-1.0, 3.0, 9.0]), 0, 6).tolist() == [0, 3, 6]
    x = np.array([0.1, 0.2])
    assert np.array_equal(brelu_f32(x, 0, 1e9), x.astype(np.float32))
    assert not brelu_f32(np.array([-1.0, -2.0]), 0, 6).any()
    with pytest.raises(ValueError):
        brelu_f32(x, 1.0, 1.0)


def _one_conv_net(kernel, bias, h=None):
    return Network([Layer("c", CONV, [INPUT], kernel=kernel, bias=bias), Layer("r", BRELU, ["c"], h=h)], (1, 2, 2))


def test_hand_computed_two_by_two():
    net = _one_conv_net(np.array([[[[2.0]]]], np.float32), np.array([-1.0], np.float32), h=4.0)
    out, taps = forward_f32(net, np.array([[[0.0, 1.0], [2.0, 3.0]]], np.float32), record_taps=True)
    assert out[0, 0].tolist() == [[0.0, 1.0], [3.0, 4.0]]
    assert taps[0].layer_id == "c" and taps[0].values[0, 0].tolist() == [[-1, 1], [3, 5]]


def test_zero_branch_residual_is_brelu(rng):
    layers = [Layer("z", CONV, [INPUT], kernel=np.zeros((1, 1, 3, 3), np.float32), bias=np.zeros(1, np.float32), pad=1),
              Layer("a", ADD, ["z", INPUT]), Layer("r", BRELU, ["a"], h=0.3)]
    net = Network(layers, (1, 6, 6))
    x = rng.standard_normal((1, 6, 6)).astype(np.float32)
    out, _ = forward_f32(net, x)
    assert np.array_equal(out[0], brelu_f32(x, 0, 0.3))


def test_forward_is_deterministic(small_nets, rng):
    x = rng.uniform(-0.5, 0.5, (3, 1, 16, 16)).astype(np.float32)
    for net in small_nets.values():
        a, _ = forward_f32(net, x)
        b, _ = forward_f32(net, x)
        assert a.tobytes() == b.tobytes()


def test_taps_cover_every_layer_and_respect_bounds(small_nets, rng):
    net = small_nets["concat"]
    net = net.replace_layer(net["relu1"].replace(h=0.2))
    _, taps = forward_f32(net, rng.uniform(-0.5, 0.5, (1, 1, 16, 16)), record_taps=True)
    assert [t.layer_id for t in taps] == net.topo_order()
    relu1 = next(t for t in taps if t.layer_id == "relu1").values
    assert relu1.min() >= 0 and relu1.max() <= np.float32(0.2)
    assert all(t.values.dtype == np.float32 for t in taps)


def test_input_shape_checked(small_nets):
    with pytest.raises(ValueError):
        forward_f32(small_nets["linear"], np.zeros((1, 8, 8), np.float32))


def test_batchnorm_f32():
    bn = BatchNorm(np.array([2.0]), np.array([0.5]), np.array([1.0]), np.array([4.0]), 0.0)
    y = np.array([[[[3.0]]]], np.float32)
    assert batchnorm_f32(y, bn)[0, 0, 0, 0] == 2.5
