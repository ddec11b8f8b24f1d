"""Deterministic float reference inference with BReLU.

Convolutions accumulate kernel taps one at a time in a fixed order
(input channel, then kernel row, then kernel column) using separate
multiply and add steps, so repeated runs give bitwise-identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import ADD, BRELU, CONCAT, CONV, INPUT, RESCALE, Network


@dataclass
class FloatActivation:
    layer_id: str
    values: np.ndarray


def _as_batch(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None]
    if x.ndim != 4:
        raise ValueError(f"expected CHW or NCHW input, got shape {x.shape}")
    return x


def conv_output_hw(h: int, w: int, kh: int, kw: int, stride: int, pad: int) -> tuple[int, int]:
    return (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kw) // stride + 1


def conv2d_f32(x, kernel, bias=None, stride: int = 1, pad: int = 0) -> np.ndarray:
    x = _as_batch(x)
    k = np.asarray(kernel)
    if stride < 1 or pad < 0:
        raise ValueError("stride must be >= 1 and pad >= 0")
    if k.ndim != 4 or k.shape[1] != x.shape[1]:
        raise ValueError(f"kernel {k.shape} does not match input {x.shape}")
    n, c, h, w = x.shape
    o, _, kh, kw = k.shape
    ho, wo = conv_output_hw(h, w, kh, kw, stride, pad)
    if ho <= 0 or wo <= 0:
        raise ValueError("kernel larger than padded input")
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    k64 = k.astype(np.float64)
    out = np.zeros((n, o, ho, wo), dtype=np.float64)
    for ci in range(c):
        for ky in range(kh):
            rows = slice(ky, ky + stride * (ho - 1) + 1, stride)
            for kx in range(kw):
                cols = slice(kx, kx + stride * (wo - 1) + 1, stride)
                tap = xp[:, ci, rows, cols][:, None]
                prod = k64[None, :, ci, ky, kx, None, None] * tap
                out += prod
    if bias is not None:
        b = np.asarray(bias, dtype=np.float64)
        if b.shape != (o,):
            raise ValueError("bias length must equal output channels")
        out += b[None, :, None, None]
    return out.astype(np.float32)


def brelu_f32(x, l: float = 0.0, h: float | None = None) -> np.ndarray:
    hi = np.inf if h is None else h
    if not l < hi:
        raise ValueError(f"BReLU needs l < h, got l={l}, h={h}")
    return np.clip(np.asarray(x, dtype=np.float32), np.float32(l), np.float32(hi))


def batchnorm_f32(y, bn) -> np.ndarray:
    y64 = y.astype(np.float64)
    shape = (1, -1, 1, 1)
    scale = np.asarray(bn.gamma, np.float64) / np.sqrt(np.asarray(bn.var, np.float64) + bn.eps)
    out = (y64 - np.asarray(bn.mean, np.float64).reshape(shape)) * scale.reshape(shape)
    return (out + np.asarray(bn.beta, np.float64).reshape(shape)).astype(np.float32)


def forward_f32(net: Network, x, record_taps: bool = False):
    """Run the float network on an already re-normalized input.

    Returns ``(output, taps)``; with ``record_taps`` every layer output is
    kept, so the pre-activation feeding each BReLU is available for
    calibration. Otherwise ``taps`` is empty.
    """
    x = _as_batch(np.asarray(x, dtype=np.float32))
    if tuple(x.shape[1:]) != net.input_shape:
        raise ValueError(f"input shape {x.shape[1:]} does not match network {net.input_shape}")
    values = {INPUT: x}
    taps = []
    for lid in net.topo_order():
        layer = net[lid]
        args = [values[s] for s in layer.inputs]
        if layer.op == CONV:
            y = conv2d_f32(args[0], layer.kernel, layer.bias, layer.stride, layer.pad)
            if layer.bn is not None:
                y = batchnorm_f32(y, layer.bn)
        elif layer.op == BRELU:
            y = brelu_f32(args[0], 0.0, layer.h)
        elif layer.op == ADD:
            y = (args[0].astype(np.float64) + args[1].astype(np.float64)).astype(np.float32)
        elif layer.op == CONCAT:
            y = np.concatenate(args, axis=1)
        elif layer.op == RESCALE:
            y = args[0]
        else:
            raise ValueError(f"unknown op {layer.op!r}")
        values[lid] = y
        if record_taps:
            taps.append(FloatActivation(lid, y))
    return values[net.output_id], taps
