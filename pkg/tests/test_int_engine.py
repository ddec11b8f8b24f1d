import ast
import inspect
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import intnet.int_engine as int_engine
from intnet.calibration import geometric_bounds_for
from intnet.int_engine import (AccumulatorOverflow, accumulator_bound, brelu_requant, check_overflow, concat_i8,
                               conv2d_i8, forward_int, rescale_signed, residual_add_i32)
from intnet.network import CONV, INPUT, RESCALE, IntegerModel, Layer, Network, QuantRecord, ValidationError
from intnet.pipeline import convert_network
from intnet.tensor import round_half_away
from oracles import wide_conv_i64


def test_ones_conv():
    out = conv2d_i8(np.ones((1, 1, 3, 3), np.int8), np.ones((1, 1, 3, 3), np.int8))
    assert out.dtype == np.int32 and out.ravel().tolist() == [9]


def test_extreme_magnitude():
    out = conv2d_i8(np.full((1, 1, 3, 3), 127, np.int8), np.full((1, 1, 3, 3), -127, np.int8))
    assert out.ravel().tolist() == [-145161]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 8), st.integers(1, 8), st.sampled_from([1, 3, 5]),
       st.integers(5, 16), st.integers(1, 2), st.integers(0, 2))
def test_matches_wide_oracle(seed, c, o, k, size, stride, pad):
    rng = np.random.default_rng(seed)
    x = rng.integers(-128, 128, (2, c, size, size), dtype=np.int8)
    w = rng.integers(-127, 128, (o, c, k, k), dtype=np.int8)
    assert np.array_equal(conv2d_i8(x, w, stride, pad), wide_conv_i64(x, w, stride, pad))


def test_tiles_threads_and_schedules_agree(rng):
    x = rng.integers(-128, 128, (1, 3, 13, 11), dtype=np.int8)
    w = rng.integers(-127, 128, (4, 3, 3, 3), dtype=np.int8)
    ref = conv2d_i8(x, w, pad=1)
    for threads, tile, sched in [(2, 3, [4, 2, 0, 1, 3]), (8, 1, list(range(12, -1, -1))), (1, 5, [2, 1, 0])]:
        assert np.array_equal(conv2d_i8(x, w, pad=1, threads=threads, tile_rows=tile, schedule=sched), ref)
    with pytest.raises(ValueError):
        conv2d_i8(x, w, pad=1, tile_rows=5, schedule=[0, 0, 1])


def test_conv_overflow_is_an_error():
    x = np.full((1, 64, 3, 3), -128, np.int8)
    w = np.full((1, 64, 3, 3), -128, np.int8)
    # 576 * 16384 fits; scale the channel count so the sum leaves int32
    big_x = np.repeat(x, 300, axis=1)
    big_w = np.repeat(w, 300, axis=1)
    with pytest.raises(AccumulatorOverflow):
        conv2d_i8(big_x, big_w)


def test_requant_examples():
    assert brelu_requant(np.array([200]).reshape(1, 1, 1, 1), [300], [13872], [15], 127).item() == 85
    assert brelu_requant(np.array([-5, 0]).reshape(1, 1, 1, 2), [300], [13872], [15], 127).tolist() == [[[[0, 0]]]]


@given(st.integers(127, 2**20), st.sampled_from([15, 31, 63, 127, 255]))
def test_requant_anchor(h_i, max_int):
    from intnet.quantizer import derive_mul_shift
    h_i = max(h_i, max_int)
    ms = derive_mul_shift(h_i, max_int)
    y = np.array([h_i, h_i + 1000, 2**31 - 1, -(2**31)], dtype=np.int64).reshape(1, 1, 1, 4)
    v = brelu_requant(y, [h_i], [ms.mul], [ms.shift], max_int)
    assert v.ravel().tolist() == [max_int, max_int, max_int, 0]
    assert v.dtype == (np.int8 if max_int <= 127 else np.int16)


@given(st.lists(st.integers(-10**6, 10**6), min_size=1, max_size=20), st.integers(1, 10**6),
       st.integers(1, 65535), st.integers(0, 31))
def test_requant_equals_clamped_round_half_away(ys, h, mul, shift):
    y = np.array(ys, dtype=np.int64).reshape(1, 1, 1, -1)
    v = brelu_requant(y, [h], [mul], [shift], 127)
    want = [min(round_half_away(Fraction(min(max(a, 0), h) * mul, 1 << shift)), 127) for a in ys]
    assert v.ravel().tolist() == want


@given(st.lists(st.integers(-10**6, 10**6), min_size=1, max_size=20), st.integers(1, 65535), st.integers(0, 31))
def test_rescale_signed_rounds_half_away(xs, mul, shift):
    x = np.array(xs, dtype=np.int64).reshape(1, 1, 1, -1)
    out = rescale_signed(x, [mul], [shift]).ravel().tolist()
    assert out == [round_half_away(Fraction(a * mul, 1 << shift)) for a in xs]


def test_residual_add_cases(rng):
    a = rng.integers(-1000, 1000, (1, 2, 3, 3)).astype(np.int32)
    assert np.array_equal(residual_add_i32(a, np.zeros_like(a)), a)
    b = rng.integers(-100, 100, (1, 2, 3, 3)).astype(np.int8)
    assert np.array_equal(residual_add_i32(a, b, ([32768], [15])), a + b)
    with pytest.raises(ValueError):
        residual_add_i32(a, b[:, :1])


@given(st.integers(0, 2**31), st.floats(10, 1e4), st.floats(1, 100))
def test_residual_add_vs_float(seed, main_ratio, skip_ratio):
    from intnet.quantizer import mul_shift_for
    rng = np.random.default_rng(seed)
    ms = mul_shift_for(Fraction(main_ratio) / Fraction(skip_ratio))
    shared = Fraction(skip_ratio) * ms.ratio
    a = rng.integers(-10**5, 10**5, (1, 1, 2, 4))
    b = rng.integers(-128, 128, (1, 1, 2, 4))
    out = residual_add_i32(a, b, ([ms.mul], [ms.shift]))
    want = a / float(shared) + b / skip_ratio
    assert np.all(np.abs(out / float(shared) - want) <= 1 / float(shared) + 1e-9)


def test_concat_cases(rng):
    a = rng.integers(0, 127, (1, 1, 3, 3)).astype(np.int8)
    b = rng.integers(0, 127, (1, 1, 3, 3)).astype(np.int8)
    out = concat_i8([a, b])
    assert out.shape == (1, 2, 3, 3) and np.array_equal(out[:, :1], a) and np.array_equal(out[:, 1:], b)
    assert np.array_equal(concat_i8([a]), a)
    ab = np.concatenate([a, b], axis=1)
    assert np.array_equal(concat_i8([ab[:, :1], ab[:, 1:]]), ab)
    with pytest.raises(ValueError):
        concat_i8([a, b], ratios=[Fraction(1), Fraction(2)])
    with pytest.raises(ValueError):
        concat_i8([a, b[:, :, :2]])


def _one_layer_model():
    k = np.array([[[[2, -1], [0, 3]]]], dtype=np.int8)
    layers = [Layer("c", CONV, [INPUT], kernel=k, bias=np.array([5], np.int32)),
              Layer("o", RESCALE, ["c"])]
    net = Network(layers, (1, 2, 3))
    recs = {"c": QuantRecord("c", CONV, delta=[Fraction(1)], ratio_x=Fraction(1), ratio_y=[Fraction(1)]),
            "o": QuantRecord("o", RESCALE, ratio_y=[Fraction(1)], ratio_v=Fraction(1, 2),
                             mul=np.array([1]), shift=np.array([1]))}
    return IntegerModel(net, recs, 127, Fraction(1, 2))


def test_hand_computed_one_layer_model():
    model = _one_layer_model()
    model.check()
    raw = np.array([[[130, 128, 127], [129, 131, 128]]], dtype=np.uint8)
    x = raw[0].astype(int) - 128  # [[2,0,-1],[1,3,0]]
    conv = [[2 * x[0, j] - x[0, j + 1] + 3 * x[1, j + 1] + 5 for j in range(2)]]
    want = [[round_half_away(Fraction(v, 2)) for v in conv[0]]]
    out, ratio = forward_int(model, raw)
    assert ratio == Fraction(1, 2)
    assert out[0, 0].tolist() == want


def test_forward_rejects_non_uint8():
    with pytest.raises(TypeError):
        forward_int(_one_layer_model(), np.zeros((1, 2, 3), np.int16))
    with pytest.raises(ValueError):
        forward_int(_one_layer_model(), np.zeros((1, 3, 3), np.uint8))


@pytest.fixture(scope="module")
def concat_model():
    from intnet.toynets import vrcnn_net
    net = vrcnn_net(np.random.default_rng(3), size=16)
    return convert_network(net, geometric_bounds_for(net, 0.5, 0.1)).model


def test_trace_ranges_and_kinds(concat_model, rng):
    raw = rng.integers(0, 256, (2, 1, 16, 16), dtype=np.uint8)
    out, ratio, values = forward_int(concat_model, raw, trace=True)
    assert ratio == concat_model.output_ratio
    for lid, v in values.items():
        assert np.issubdtype(v.dtype, np.integer), lid
        if lid != INPUT and concat_model.network[lid].op in ("brelu", "concat"):
            assert v.min() >= 0 and v.max() <= concat_model.max_int


def test_thread_count_independence(concat_model, rng):
    raw = rng.integers(0, 256, (1, 1, 16, 16), dtype=np.uint8)
    a, _ = forward_int(concat_model, raw)
    b, _ = forward_int(concat_model, raw, threads=4, tile_rows=3)
    assert a.tobytes() == b.tobytes()


def test_static_overflow_bound(concat_model):
    bounds = accumulator_bound(concat_model)
    k = concat_model.network["conv3a"].kernel
    assert bounds["conv3a"] >= k[0].size * 128 * 127
    check_overflow(concat_model)
    huge = concat_model.network.replace_layer(
        concat_model.network["conv1"].replace(bias=np.full(8, 2**31 - 1, np.int32)))
    with pytest.raises(ValidationError):
        check_overflow(IntegerModel(huge, concat_model.records, 127, concat_model.output_ratio))


def test_no_float_operations_in_int_engine():
    """Code audit: the integer engine never touches floating point."""
    tree = ast.parse(inspect.getsource(int_engine))
    for node in ast.walk(tree):
        assert not (isinstance(node, ast.Constant) and isinstance(node.value, float)), ast.dump(node)
        assert not (isinstance(node, ast.BinOp) and isinstance(node.op, ast.Div)), ast.dump(node)
        assert not (isinstance(node, ast.Name) and node.id in ("float", "math")), ast.dump(node)
        assert not (isinstance(node, ast.Attribute) and "float" in node.attr), ast.dump(node)
        if isinstance(node, (ast.Import, ast.ImportFrom)):
            names = [a.name for a in node.names] + [getattr(node, "module", None) or ""]
            assert not any(n in ("math", "fractions", "Fraction") for n in names), names


def test_runs_with_float_errors_trapped(concat_model, rng):
    raw = rng.integers(0, 256, (1, 1, 16, 16), dtype=np.uint8)
    with np.errstate(all="raise"):
        forward_int(concat_model, raw)
