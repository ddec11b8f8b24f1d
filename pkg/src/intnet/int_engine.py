"""Integer-only inference.

Everything here works on integer numpy arrays with int64 intermediates;
there is no floating-point arithmetic on the inference path. Output tiles
of a convolution may be computed by several threads in any order, and the
result is the same because integer addition is exact.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Sequence

import numpy as np

from .network import ADD, BRELU, CONCAT, CONV, INPUT, RESCALE, IntegerModel, ValidationError
from .tensor import INT32_MAX, fits_int32


class AccumulatorOverflow(ArithmeticError):
    pass


def _as_batch(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None]
    if x.ndim != 4:
        raise ValueError(f"expected CHW or NCHW input, got shape {x.shape}")
    return x


def _conv_rows(xp, w, stride, row0, row1, wo):
    kh, kw = w.shape[2], w.shape[3]
    rows = xp[:, :, row0 * stride: (row1 - 1) * stride + kh, :]
    win = np.lib.stride_tricks.sliding_window_view(rows, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, : row1 - row0, :wo]
    # (n, c, r, wo, kh, kw) x (o, c, kh, kw) -> (n, r, wo, o)
    acc = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return acc.transpose(0, 3, 1, 2)


def conv2d_i8(x_i, w_i, stride: int = 1, pad: int = 0, *, threads: int = 1,
              tile_rows: int | None = None, schedule: Sequence[int] | None = None) -> np.ndarray:
    """Exact integer cross-correlation returning int32 accumulators.

    ``tile_rows`` splits the output rows into tiles; ``schedule`` gives the
    order in which tiles are submitted, and ``threads`` the pool size.
    """
    x = _as_batch(x_i)
    w = np.asarray(w_i)
    if w.ndim != 4 or w.shape[1] != x.shape[1]:
        raise ValueError(f"kernel {w.shape} does not match input {x.shape}")
    if stride < 1 or pad < 0:
        raise ValueError("stride must be >= 1 and pad >= 0")
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError("kernel larger than padded input")
    xp = np.pad(x.astype(np.int64), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    w64 = w.astype(np.int64)
    step = tile_rows or ho
    tiles = [(r, min(r + step, ho)) for r in range(0, ho, step)]
    order = list(schedule) if schedule is not None else range(len(tiles))
    if sorted(order) != list(range(len(tiles))):
        raise ValueError("schedule must be a permutation of the tile indices")
    out = np.empty((n, o, ho, wo), dtype=np.int64)

    def run(t):
        r0, r1 = tiles[t]
        out[:, :, r0:r1, :] = _conv_rows(xp, w64, stride, r0, r1, wo)

    if threads > 1 and len(tiles) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run, order))
    else:
        for t in order:
            run(t)
    if not fits_int32(out):
        raise AccumulatorOverflow("convolution accumulator left the int32 range")
    return out.astype(np.int32)


def _per_channel(v, ndim: int = 4) -> np.ndarray:
    return np.asarray(v, dtype=np.int64).reshape((1, -1) + (1,) * (ndim - 2))


def _half(shift: np.ndarray) -> np.ndarray:
    return np.where(shift > 0, np.left_shift(np.int64(1), np.maximum(shift - 1, 0)), 0)


def brelu_requant(y_i, h_i, mul, shift, max_int: int) -> np.ndarray:
    """Clamp at [0, h_i] in the accumulator domain, then requantize.

    ``(y * mul + 2**(shift-1)) >> shift`` on non-negative values is the
    round-half-away product ``y * mul / 2**shift``.
    """
    y = _as_batch(y_i).astype(np.int64)
    h = _per_channel(h_i)
    m = _per_channel(mul)
    s = _per_channel(shift)
    clamped = np.minimum(np.maximum(y, 0), h)
    v = np.right_shift(clamped * m + _half(s), s)
    v = np.minimum(v, max_int)
    return v.astype(np.int8 if max_int <= 127 else np.int16)


def rescale_signed(x, mul, shift) -> np.ndarray:
    """Round-half-away ``x * mul / 2**shift`` on signed integers, in int64."""
    x = _as_batch(x).astype(np.int64)
    m = _per_channel(mul)
    s = _per_channel(shift)
    mag = np.right_shift(np.abs(x) * m + _half(s), s)
    return np.where(x < 0, -mag, mag)


def residual_add_i32(a, b, rescale=None) -> np.ndarray:
    """Add the main operand ``a`` and the skip operand ``b``.

    ``rescale`` is an optional (mul, shift) pair applied to the skip first.
    """
    a = _as_batch(a)
    b = _as_batch(b)
    if a.shape != b.shape:
        raise ValueError(f"residual operands differ in shape: {a.shape} vs {b.shape}")
    skip = b.astype(np.int64)
    if rescale is not None:
        mul, shift = rescale
        skip = rescale_signed(skip, mul, shift)
    total = a.astype(np.int64) + skip
    if not fits_int32(total):
        raise AccumulatorOverflow("residual sum left the int32 range")
    return total.astype(np.int32)


def concat_i8(inputs, ratios=None) -> np.ndarray:
    arrays = [_as_batch(t) for t in inputs]
    if not arrays:
        raise ValueError("concat needs at least one input")
    if len({a.shape[2:] for a in arrays}) != 1 or len({a.shape[0] for a in arrays}) != 1:
        raise ValueError("concat inputs must share batch and spatial dims")
    if ratios is not None and len(set(ratios)) > 1:
        raise ValueError(f"concat inputs carry different ratios: {list(ratios)}")
    return np.concatenate(arrays, axis=1)


def accumulator_bound(model: IntegerModel) -> dict[str, int]:
    """Worst-case |accumulator| per conv, from kernel sizes and biases."""
    bounds = {}
    act_max = max(model.max_int, 128)
    for layer in model.network.convs():
        taps = int(np.prod(layer.kernel.shape[1:]))
        bounds[layer.id] = taps * act_max * 127 + int(np.abs(layer.bias.astype(np.int64)).max(initial=0))
    return bounds


def check_overflow(model: IntegerModel) -> None:
    for lid, bound in accumulator_bound(model).items():
        if bound > INT32_MAX:
            raise ValidationError(lid, f"accumulator bound {bound} exceeds int32")


def forward_int(model: IntegerModel, raw, *, threads: int = 1, tile_rows: int | None = None,
                schedules: dict | None = None, trace: bool = False):
    """Run the integer model on raw uint8 input.

    Returns ``(output, output_ratio)``, plus a dict of every layer's integer
    output when ``trace`` is set. ``schedules`` maps conv ids to tile orders.
    """
    raw = _as_batch(raw)
    if raw.dtype != np.uint8:
        raise TypeError("integer inference takes uint8 input")
    net = model.network
    if tuple(raw.shape[1:]) != net.input_shape:
        raise ValueError(f"input shape {raw.shape[1:]} does not match network {net.input_shape}")
    values = {INPUT: (raw.astype(np.int16) - 128).astype(np.int8)}
    for lid in net.topo_order():
        layer, rec = net[lid], model.records[lid]
        args = [values[s] for s in layer.inputs]
        if layer.op == CONV:
            order = schedules.get(lid) if schedules else None
            u = conv2d_i8(args[0], layer.kernel, layer.stride, layer.pad,
                          threads=threads, tile_rows=tile_rows, schedule=order)
            y = u.astype(np.int64) + _per_channel(layer.bias)
            if not fits_int32(y):
                raise AccumulatorOverflow(f"{lid}: biased accumulator left the int32 range")
            values[lid] = y.astype(np.int32)
        elif layer.op == BRELU:
            values[lid] = brelu_requant(args[0], rec.h_i, rec.mul, rec.shift, model.max_int)
        elif layer.op == ADD:
            values[lid] = residual_add_i32(args[0], args[1], (rec.mul, rec.shift))
        elif layer.op == CONCAT:
            values[lid] = concat_i8(args)
        elif layer.op == RESCALE:
            out = rescale_signed(args[0], rec.mul, rec.shift)
            if not fits_int32(out):
                raise AccumulatorOverflow("rescaled output left the int32 range")
            values[lid] = out.astype(np.int32)
    out = values[net.output_id]
    if trace:
        return out, model.output_ratio, values
    return out, model.output_ratio
