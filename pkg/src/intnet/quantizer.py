"""Conversion math: weight steps, BN folding, mul/shift, BReLU fixup, ratio sync.

All ratios are kept as :class:`fractions.Fraction` so that the identities
the integer engine relies on (``ratio_v == ratio_y * mul / 2**shift`` and
equal ratios at every merge) hold exactly rather than approximately.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .tensor import INT32_MAX, INT32_MIN, round_half_away

MAX_MUL = 2**16 - 1
MAX_SHIFT = 31
WEIGHT_MAX = 127


class QuantizationError(ValueError):
    pass


class PruneWarning(UserWarning):
    """An output channel quantized to all zeros and can be pruned."""


@dataclass(frozen=True)
class MulShift:
    mul: int
    shift: int

    @property
    def ratio(self) -> Fraction:
        return Fraction(self.mul, 1 << self.shift)


def mul_shift_for(ratio) -> MulShift:
    """Canonical (mul, shift) approximating ``ratio``.

    Picks the largest shift in [0, 31] whose rounded multiplier still fits in
    16 bits. Any other representable pair is an integer at that shift too, so
    the nearest-integer choice there has the smallest error.
    """
    ratio = Fraction(ratio)
    if ratio <= 0:
        raise QuantizationError(f"rescale ratio must be positive, got {ratio}")
    for shift in range(MAX_SHIFT, -1, -1):
        mul = round_half_away(ratio * (1 << shift))
        if mul <= MAX_MUL:
            if mul == 0:
                raise QuantizationError(f"ratio {float(ratio):.3g} too small for a 16-bit multiplier")
            return MulShift(mul, shift)
    raise QuantizationError(f"ratio {float(ratio):.3g} too large for a 16-bit multiplier")


def derive_mul_shift(h_ri: int, max_int: int) -> MulShift:
    """Requantization pair mapping ``h_ri`` onto ``max_int``."""
    if max_int < 1 or h_ri < 1:
        raise QuantizationError("h_ri and max_int must be positive")
    if h_ri < max_int:
        raise QuantizationError(
            f"h_ri={h_ri} is below max_int={max_int}; requantization must scale down")
    return mul_shift_for(Fraction(max_int, h_ri))


def snap_down(x: Fraction, bits: int) -> Fraction:
    """Largest ``m * 2**e <= x`` with ``m < 2**bits``."""
    x = Fraction(x)
    if x <= 0:
        raise QuantizationError("can only snap positive ratios")
    e = x.numerator.bit_length() - x.denominator.bit_length() - bits
    scaled = x / Fraction(2) ** e
    while scaled >= 1 << bits:
        e += 1
        scaled = x / Fraction(2) ** e
    while scaled < 1 << (bits - 1):
        e -= 1
        scaled = x / Fraction(2) ** e
    return math.floor(scaled) * Fraction(2) ** e


# -- weights -----------------------------------------------------------------


def _channel_view(w: np.ndarray) -> np.ndarray:
    return w.reshape(w.shape[0], -1) if w.ndim > 1 else w.reshape(1, -1)


def quantize_weights(w_f: np.ndarray, per_channel: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric 8-bit quantization with step ``max|W| / 127`` per group.

    Returns the int8 kernel and one step per output channel (a per-tensor
    step is repeated). An all-zero channel gets step 0 and a PruneWarning.
    """
    w = np.asarray(w_f)
    if w.size == 0:
        raise QuantizationError("cannot quantize an empty kernel")
    w64 = w.astype(np.float64)
    flat = _channel_view(w64)
    if per_channel:
        maxabs = np.abs(flat).max(axis=1)
    else:
        maxabs = np.full(flat.shape[0], np.abs(flat).max())
    zero = maxabs == 0
    if zero.any():
        warnings.warn(f"all-zero output channels {np.flatnonzero(zero).tolist()} can be pruned",
                      PruneWarning, stacklevel=2)
    safe = np.where(zero, 1.0, maxabs)
    # divide by the max first so exact fractions of it land on exact ties
    q = round_half_away(flat / safe[:, None] * WEIGHT_MAX)
    q[zero] = 0
    step = np.where(zero, 0.0, maxabs / WEIGHT_MAX)
    return q.reshape(w.shape).astype(np.int8), step


def weight_steps(w_f: np.ndarray, per_channel: bool = True) -> list[Fraction]:
    """Exact per-channel steps ``max|W| / 127`` (0 for all-zero channels)."""
    flat = np.abs(_channel_view(np.asarray(w_f, dtype=np.float64)))
    if per_channel:
        maxabs = flat.max(axis=1)
    else:
        maxabs = np.full(flat.shape[0], flat.max())
    return [Fraction(float(m)) / WEIGHT_MAX for m in maxabs]


def _steps_column(delta, n_channels: int) -> np.ndarray:
    d = np.asarray([float(x) for x in np.atleast_1d(delta)], dtype=np.float64)
    if d.size == 1:
        d = np.full(n_channels, d[0])
    if d.size != n_channels:
        raise QuantizationError(f"expected {n_channels} steps, got {d.size}")
    return d[:, None]


def quantize_with_step(w_f: np.ndarray, delta) -> np.ndarray:
    """int8 kernel ``round(W / delta)``; errors if any value leaves [-127, 127]."""
    w = np.asarray(w_f)
    flat = _channel_view(w.astype(np.float64))
    d = _steps_column(delta, flat.shape[0])
    if np.any(d <= 0):
        raise QuantizationError("quantization step must be positive")
    q = round_half_away(flat / d)
    if np.abs(q).max(initial=0) > WEIGHT_MAX:
        raise QuantizationError("weights exceed the int8 range at this step")
    return q.reshape(w.shape).astype(np.int8)


def discretize_weights(w_f: np.ndarray, delta) -> np.ndarray:
    """Float kernel snapped to the integer grid: ``round(W / delta) * delta``."""
    w = np.asarray(w_f)
    flat = _channel_view(w.astype(np.float64))
    d = _steps_column(delta, flat.shape[0])
    if np.any(d <= 0):
        raise QuantizationError("quantization step must be positive")
    w_d = round_half_away(flat / d) * d
    return w_d.reshape(w.shape).astype(np.float32)


def fold_batchnorm(kernel, bias, gamma, beta, mean, var, eps=0.0):
    """Absorb a batch-norm into the preceding convolution."""
    k = np.asarray(kernel, dtype=np.float64)
    b = np.asarray(bias, dtype=np.float64)
    denom = np.asarray(var, dtype=np.float64) + eps
    if np.any(denom <= 0):
        raise QuantizationError("batch-norm variance + eps must be positive")
    s = np.asarray(gamma, dtype=np.float64) / np.sqrt(denom)
    if len(s) != k.shape[0] or len(b) != k.shape[0]:
        raise QuantizationError("batch-norm parameters do not match output channels")
    k2 = k * s.reshape(-1, *([1] * (k.ndim - 1)))
    b2 = (b - np.asarray(mean, dtype=np.float64)) * s + np.asarray(beta, dtype=np.float64)
    return k2.astype(np.float32), b2.astype(np.float32)


def quantize_bias(b_f, ratio_y) -> np.ndarray:
    """int32 bias at the accumulator ratio of each channel."""
    b = np.atleast_1d(np.asarray(b_f, dtype=np.float64))
    ratios = list(ratio_y) if isinstance(ratio_y, (list, tuple, np.ndarray)) else [ratio_y] * len(b)
    if len(ratios) == 1 and len(b) > 1:
        ratios = ratios * len(b)
    out = []
    for value, r in zip(b, ratios):
        r = Fraction(r)
        if r <= 0:
            raise QuantizationError("bias ratio must be positive")
        q = round_half_away(Fraction(float(value)) * r)
        if not INT32_MIN <= q <= INT32_MAX:
            raise QuantizationError(f"bias {value} overflows int32 at ratio {float(r):.4g}")
        out.append(q)
    return np.asarray(out, dtype=np.int32)


def renormalize_input(raw: np.ndarray, ratio_x=1) -> tuple[np.ndarray, Fraction]:
    """Integer input ``raw - 128`` and the model's input ratio."""
    raw = np.asarray(raw)
    if raw.dtype != np.uint8:
        if raw.size and (raw.min() < 0 or raw.max() > 255):
            raise QuantizationError("raw input must lie in [0, 255]")
        raw = raw.astype(np.uint8)
    return (raw.astype(np.int16) - 128).astype(np.int8), Fraction(ratio_x)


def float_input(raw: np.ndarray, ratio_x=1) -> np.ndarray:
    """Float-side counterpart of :func:`renormalize_input`."""
    x = np.asarray(raw, dtype=np.float64) - 128.0
    return (x / float(Fraction(ratio_x))).astype(np.float32)


# -- activations ---------------------------------------------------------------


@dataclass(frozen=True)
class BReluFixup:
    h_ri: int
    ms: MulShift
    ratio_v: Fraction
    h_f: Fraction
    h_i: int


def fixup_brelu(h_rf: float, ratio_y, max_int: int) -> BReluFixup:
    """Quantize a recommended bound and move it so it lands exactly on max_int."""
    if not h_rf > 0:
        raise QuantizationError(f"h_rf must be positive, got {h_rf}")
    ratio_y = Fraction(ratio_y)
    if ratio_y <= 0:
        raise QuantizationError("ratio_y must be positive")
    h_ri = round_half_away(Fraction(h_rf) * ratio_y)
    ms = derive_mul_shift(h_ri, max_int)
    ratio_v = ratio_y * ms.ratio
    h_f = max_int / ratio_v
    h_i = round_half_away(h_f * ratio_y)
    return BReluFixup(h_ri, ms, ratio_v, h_f, h_i)


# -- ratio synchronization ---------------------------------------------------


@dataclass(frozen=True)
class SyncedBranch:
    delta: Fraction
    ratio_y: Fraction
    mul: int
    shift: int
    ratio_v: Fraction


def retarget(branches: Sequence[tuple], target: Fraction) -> list[SyncedBranch]:
    """Move every (delta, ratio_y) branch onto the output ratio ``target``.

    Each branch gets its own (mul, shift); its step is then stretched by
    the residual mismatch so that ``ratio_y * mul / 2**shift == target``
    holds exactly. The product ``delta * ratio_y`` is preserved.
    """
    target = Fraction(target)
    out = []
    for delta, ratio_y, *_ in branches:
        delta, ratio_y = Fraction(delta), Fraction(ratio_y)
        ms = mul_shift_for(target / ratio_y)
        factor = ratio_y * ms.mul / ((1 << ms.shift) * target)
        out.append(SyncedBranch(
            delta=delta * factor,
            ratio_y=target * (1 << ms.shift) / ms.mul,
            mul=ms.mul, shift=ms.shift, ratio_v=target))
    return out


def sync_concat(branches: Sequence[tuple], snap_bits: int | None = None) -> list[SyncedBranch]:
    """Ratio synchronization for a concatenation.

    ``branches`` holds ``(delta_i, ratio_y_i, ratio_v_i)``. The smallest
    output ratio becomes the shared reference so no branch can overflow.
    With ``snap_bits`` the reference is first rounded down to a short dyadic
    so ratios stay compact across layers.
    """
    if len(branches) < 1:
        raise QuantizationError("nothing to synchronize")
    for b in branches:
        if min(Fraction(b[0]), Fraction(b[1]), Fraction(b[2])) <= 0:
            raise QuantizationError("branch steps and ratios must be positive")
    ratio_min = min(Fraction(b[2]) for b in branches)
    if snap_bits:
        ratio_min = snap_down(ratio_min, snap_bits)
    return retarget(branches, ratio_min)


@dataclass(frozen=True)
class ResidualSync:
    rescale: MulShift
    ratio: Fraction
    delta: list[Fraction]


def sync_residual(skip_ratio, main_ratio_x, main_delta: Sequence) -> ResidualSync:
    """Synchronize a skip path with the last conv of the main path.

    The skip operand is rescaled by (mul, shift) toward the main branch's
    accumulator ratio, then the main conv's step is set so both addends
    carry exactly the same ratio. The smallest per-channel main ratio is
    used as the aim so no main-branch weight grows past 127.
    """
    skip_ratio, main_ratio_x = Fraction(skip_ratio), Fraction(main_ratio_x)
    deltas = [Fraction(d) for d in main_delta]
    if skip_ratio <= 0 or main_ratio_x <= 0 or any(d <= 0 for d in deltas):
        raise QuantizationError("residual sync needs known positive ratios and steps")
    main_ratio = min(main_ratio_x / d for d in deltas)
    ms = mul_shift_for(main_ratio / skip_ratio)
    shared = skip_ratio * ms.ratio
    return ResidualSync(ms, shared, [main_ratio_x / shared] * len(deltas))
