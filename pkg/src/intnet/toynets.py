"""Small random networks for tests, demos and benchmarks."""

from __future__ import annotations

from fractions import Fraction

import numpy as np

from .network import ADD, BRELU, CONCAT, CONV, INPUT, RESCALE, BatchNorm, Layer, Network


def _conv(rng: np.random.Generator, lid: str, src: str, c_in: int, c_out: int, k: int,
          gain: float = 1.0, bias_scale: float = 0.05) -> Layer:
    std = gain * np.sqrt(2.0 / (c_in * k * k))
    kernel = (rng.standard_normal((c_out, c_in, k, k)) * std).astype(np.float32)
    bias = (rng.standard_normal(c_out) * bias_scale).astype(np.float32)
    return Layer(lid, CONV, [src], kernel=kernel, bias=bias, pad=k // 2)


def _brelu(lid: str, src: str, h: float | None = None) -> Layer:
    return Layer(lid, BRELU, [src], h=h)


def random_bn(rng: np.random.Generator, channels: int) -> BatchNorm:
    return BatchNorm(
        gamma=rng.uniform(0.5, 1.5, channels).astype(np.float32),
        beta=rng.normal(0, 0.1, channels).astype(np.float32),
        mean=rng.normal(0, 0.1, channels).astype(np.float32),
        var=rng.uniform(0.5, 2.0, channels).astype(np.float32),
        eps=1e-5,
    )


def linear_net(rng: np.random.Generator, size: int = 16, channels: int = 4, bn: bool = False) -> Network:
    """conv-brelu x2, then a final conv rescaled to the output."""
    layers = [
        _conv(rng, "conv1", INPUT, 1, channels, 3), _brelu("relu1", "conv1"),
        _conv(rng, "conv2", "relu1", channels, channels, 3), _brelu("relu2", "conv2"),
        _conv(rng, "conv3", "relu2", channels, 1, 3), Layer("out", RESCALE, ["conv3"]),
    ]
    if bn:
        layers[0] = layers[0].replace(bn=random_bn(rng, channels))
        layers[2] = layers[2].replace(bn=random_bn(rng, channels))
    return Network(layers, (1, size, size), Fraction(256))


def residual_net(rng: np.random.Generator, size: int = 16, channels: int = 4, skip_conv: bool = False) -> Network:
    """Residual block whose skip is the block input or a 1x1 conv of it."""
    layers = [
        _conv(rng, "conv1", INPUT, 1, channels, 3), _brelu("relu1", "conv1"),
        _conv(rng, "conv2", "relu1", channels, channels, 3), _brelu("relu2", "conv2"),
        _conv(rng, "conv3", "relu2", channels, channels, 3),
    ]
    if skip_conv:
        layers.append(_conv(rng, "skip", "relu1", channels, channels, 1))
        layers.append(Layer("add", ADD, ["conv3", "skip"]))
    else:
        layers.append(Layer("add", ADD, ["conv3", "relu1"]))
    layers += [
        _brelu("relu3", "add"),
        _conv(rng, "conv4", "relu3", channels, 1, 3), Layer("out", RESCALE, ["conv4"]),
    ]
    return Network(layers, (1, size, size), Fraction(256))


def vrcnn_net(rng: np.random.Generator, size: int = 64, widths=(8, 4, 4, 4, 4)) -> Network:
    """Four conv stages with two concatenations and a global input skip.

    ``widths`` are the channel counts of conv1, conv2 (5x5), conv2 (3x3),
    conv3 (3x3) and conv3 (1x1).
    """
    w1, w2a, w2b, w3a, w3b = widths
    layers = [
        _conv(rng, "conv1", INPUT, 1, w1, 5), _brelu("relu1", "conv1"),
        _conv(rng, "conv2a", "relu1", w1, w2a, 5), _brelu("relu2a", "conv2a"),
        _conv(rng, "conv2b", "relu1", w1, w2b, 3), _brelu("relu2b", "conv2b"),
        Layer("cat2", CONCAT, ["relu2a", "relu2b"]),
        _conv(rng, "conv3a", "cat2", w2a + w2b, w3a, 3), _brelu("relu3a", "conv3a"),
        _conv(rng, "conv3b", "cat2", w2a + w2b, w3b, 1), _brelu("relu3b", "conv3b"),
        Layer("cat3", CONCAT, ["relu3a", "relu3b"]),
        _conv(rng, "conv4", "cat3", w3a + w3b, 1, 3, gain=0.1, bias_scale=0.0),
        Layer("add", ADD, ["conv4", INPUT]),
        Layer("out", RESCALE, ["add"]),
    ]
    return Network(layers, (1, size, size), Fraction(256))


VRCNN_WIDTHS = (64, 16, 32, 16, 32)


def vrcnn_full(rng: np.random.Generator, size: int = 64) -> Network:
    """Full-width variant: 54,512 kernel weights."""
    return vrcnn_net(rng, size, VRCNN_WIDTHS)


def random_images(rng: np.random.Generator, count: int, shape) -> list[np.ndarray]:
    return [rng.integers(0, 256, size=tuple(shape), dtype=np.uint8) for _ in range(count)]
