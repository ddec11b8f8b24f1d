from fractions import Fraction

import numpy as np
import pytest

from intnet.calibration import NSigmaCalibrator, geometric_bounds_for
from intnet.int_engine import forward_int
from intnet.metrics import equivalence_psnr, reference_network
from intnet.network import ADD, BRELU, CONV, INPUT, RESCALE, Layer, Network, ValidationError
from intnet.pipeline import PipelineConfig, convert_network, fold_network, initial_steps
from intnet.quantizer import float_input
from intnet.tensor import round_half_away
from intnet.toynets import linear_net, random_images, residual_net, vrcnn_net


def test_config_bits_range():
    assert PipelineConfig().max_int == 127
    assert PipelineConfig(activation_bits=4).max_int == 15
    for bad in (3, 9):
        with pytest.raises(ValueError):
            PipelineConfig(activation_bits=bad)


def test_single_conv_net_records():
    k = np.array([[[[0.5, -0.25], [0.125, 1.0]]]], np.float32)
    net = Network([Layer("c", CONV, [INPUT], kernel=k, bias=np.array([0.1], np.float32)),
                   Layer("r", BRELU, ["c"])], (1, 4, 4), Fraction(1))
    model = convert_network(net, {"r": 100.0}).model
    model.check()
    c, r = model.records["c"], model.records["r"]
    assert c.delta == [Fraction(1, 127)] and c.ratio_w == [127]
    assert c.ratio_y == [c.ratio_x / c.delta[0]]
    assert r.ratio_v == r.ratio_y[0] * r.scale(0)
    assert r.h_f == 127 / r.ratio_v and int(r.h_i[0]) == round_half_away(r.h_f * r.ratio_y[0])
    assert round_half_away(Fraction(int(r.h_i[0]) * int(r.mul[0]), 1 << int(r.shift[0]))) == 127
    assert model.network["c"].kernel.tolist() == [[[[64, -32], [16, 127]]]]
    assert model.output_ratio == r.ratio_v


def test_vrcnn_geometric_conversion_without_finetune(rng):
    net = vrcnn_net(rng, size=16)
    calls = []
    conv = convert_network(net, geometric_bounds_for(net, 0.5, 0.1),
                           finetune=lambda n, stage: calls.append(stage) or n)
    conv.model.check()
    assert calls == ["renormalized", "discretized", "brelu"]
    kinds = [e.kind for e in conv.plan.events]
    assert kinds == ["concat", "concat", "residual"]
    cat = conv.plan.events[0]
    assert cat.detail["reference"] <= min(cat.detail["branch_ratios"].values())


def test_residual_sync_invoked_once(rng):
    net = residual_net(rng)
    conv = convert_network(net, {"relu1": 1.0, "relu2": 1.0, "relu3": 1.0})
    res = [e for e in conv.plan.events if e.kind == "residual"]
    assert len(res) == 1 and res[0].detail["skip_type"] == "identity"
    rec = conv.model.records
    assert set(rec["conv3"].ratio_y) == {rec["add"].ratio_v}
    assert rec["relu1"].ratio_v * rec["add"].scale(0) == rec["add"].ratio_v


def test_conv_skip_is_collapsed(rng):
    net = residual_net(rng, skip_conv=True)
    conv = convert_network(net, {"relu1": 1.0, "relu2": 1.0, "relu3": 1.0})
    rec = conv.model.records
    assert len(set(rec["skip"].ratio_y)) == 1
    assert conv.plan.events[0].detail["skip_type"] == "conv"
    conv.model.check()


def test_batchnorm_gives_per_channel_steps(rng):
    net = linear_net(rng, bn=True)
    folded = fold_network(net)
    assert all(l.bn is None for l in folded.layers)
    model = convert_network(net, {"relu1": 2.0, "relu2": 2.0}).model
    assert len(set(model.records["conv1"].delta)) == 4


def test_zero_channel_is_a_prune_candidate(rng):
    net = linear_net(rng)
    k = net["conv1"].kernel.copy()
    k[2] = 0
    net = net.replace_layer(net["conv1"].replace(kernel=k))
    steps, pruned = initial_steps(net, True)
    assert pruned["conv1"] == [2] and all(s > 0 for s in steps["conv1"])
    model = convert_network(net, {"relu1": 2.0, "relu2": 2.0}).model
    assert model.records["conv1"].pruned == [2]
    assert not model.network["conv1"].kernel[2].any()


def test_eight_bit_activations_use_int16(rng):
    net = linear_net(rng)
    model = convert_network(net, {"relu1": 2.0, "relu2": 2.0}, PipelineConfig(activation_bits=8)).model
    assert model.max_int == 255 and model.activation_bits == 8
    _, _, values = forward_int(model, rng.integers(0, 256, (1, 16, 16), dtype=np.uint8), trace=True)
    assert values["relu1"].dtype == np.int16 and values["relu1"].max() <= 255


def test_input_ratio_override(rng):
    net = linear_net(rng)
    conv = convert_network(net, {"relu1": 2.0, "relu2": 2.0}, PipelineConfig(input_ratio=Fraction(128)))
    assert conv.model.network.input_ratio == 128 and conv.model.records["conv1"].ratio_x == 128


def test_bound_search_raises_n_until_threshold(rng):
    net = linear_net(rng)
    imgs = random_images(rng, 4, net.input_shape)
    cal = NSigmaCalibrator([float_input(np.stack(imgs), net.input_ratio)])
    scores = iter([0.1, 0.5, 0.95])
    conv = convert_network(net, cal, PipelineConfig(n=2.0, n_step=0.5, threshold=0.1),
                           metric=lambda candidate: 1.0 if candidate["relu1"].h is None else next(scores))
    assert [n for n, _ in conv.tried] == [2.0, 2.5, 3.0]
    assert conv.n == 3.0 and conv.met and conv.reference == 1.0


def test_bound_search_keeps_best_at_cap(rng):
    net = linear_net(rng)
    imgs = random_images(rng, 4, net.input_shape)
    cal = NSigmaCalibrator([float_input(np.stack(imgs), net.input_ratio)])
    scores = iter([0.3, 0.6, 0.2])
    conv = convert_network(net, cal, PipelineConfig(n=3.0, n_step=1.0, n_cap=5.0),
                           metric=lambda candidate: 1.0 if candidate["relu1"].h is None else next(scores))
    assert not conv.met and conv.n == 4.0 and len(conv.tried) == 3


def test_fixed_bounds_ignore_n(rng):
    net = linear_net(rng)
    conv = convert_network(net, {"relu1": 2.0, "relu2": 2.0}, metric=lambda n: 0.0)
    assert conv.n is None and len(conv.tried) == 1


@pytest.mark.parametrize("layers, message", [
    ([Layer("c", CONV, [INPUT], kernel=np.ones((1, 1, 1, 1), np.float32), bias=np.zeros(1, np.float32))],
     "must end in"),
    ([Layer("r", BRELU, [INPUT]), Layer("o", RESCALE, ["r"])], "BReLU must follow"),
    ([Layer("c", CONV, [INPUT], kernel=np.ones((1, 1, 1, 1), np.float32), bias=np.zeros(1, np.float32)),
      Layer("d", CONV, [INPUT], kernel=np.ones((1, 1, 1, 1), np.float32), bias=np.zeros(1, np.float32)),
      Layer("r", BRELU, ["c"]), Layer("q", BRELU, ["d"]), Layer("a", ADD, ["r", "q"])], "first residual input"),
    ([Layer("c", CONV, [INPUT], kernel=np.ones((1, 1, 1, 1), np.float32), bias=np.zeros(1, np.float32)),
      Layer("r", BRELU, ["c"]), Layer("q", BRELU, ["c"]), Layer("a", ADD, ["r", "q"])], "must feed only"),
])
def test_unsupported_topologies(layers, message):
    net = Network(layers, (1, 4, 4))
    with pytest.raises(ValidationError, match=message):
        convert_network(net, {"r": 1.0, "q": 1.0})


def test_missing_bound_names_layer(rng):
    with pytest.raises(ValidationError) as exc:
        convert_network(linear_net(rng), {"relu1": 2.0})
    assert exc.value.layer_id == "relu2"


def test_tiny_bound_is_a_validation_error(rng):
    with pytest.raises(ValidationError, match="below max_int"):
        convert_network(linear_net(rng), {"relu1": 1e-3, "relu2": 2.0})


@pytest.mark.parametrize("builder", [linear_net, residual_net, vrcnn_net])
def test_equivalence_on_small_nets(builder, rng):
    net = builder(rng, size=16)
    imgs = random_images(rng, 6, net.input_shape)
    cal = NSigmaCalibrator([float_input(np.stack(imgs), net.input_ratio)])
    conv = convert_network(net, cal)
    assert equivalence_psnr(reference_network(net, conv.plan.bounds), conv.model, imgs) > 35
