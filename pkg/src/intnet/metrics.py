"""Float-versus-integer comparison helpers."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

from .calibration import with_bounds
from .float_engine import forward_f32
from .int_engine import forward_int
from .network import IntegerModel, Network
from .pipeline import PipelineConfig, convert_network, fold_network
from .quantizer import float_input

REGRESS = "regress"
CLASSIFY = "classify"


def dequantize(out_i: np.ndarray, ratio: Fraction) -> np.ndarray:
    """Integer output divided by its ratio, as float64."""
    return np.asarray(out_i, dtype=np.float64) / float(Fraction(ratio))


def mse(a, b) -> float:
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.mean(d * d))


def psnr(reference, test, peak: float = 1.0) -> float:
    m = mse(reference, test)
    if m == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / m)


@dataclass
class Comparison:
    max_abs: float
    mean_abs: float
    psnr: float
    agreement: float | None = None  # top-1 agreement in classify mode

    def as_dict(self) -> dict:
        out = {"max_abs_error": self.max_abs, "mean_abs_error": self.mean_abs, "psnr_db": self.psnr}
        if self.agreement is not None:
            out["top1_agreement"] = self.agreement
        return out


def compare_outputs(float_out, int_out, ratio: Fraction, mode: str = REGRESS, peak: float = 1.0) -> Comparison:
    """Error statistics between a float output and an integer output.

    In regress mode the integer output is divided by its ratio first. In
    classify mode the ratio is ignored: the float output is scaled onto the
    integer grid instead and the arg-max over channels is compared too.
    """
    f = np.asarray(float_out, dtype=np.float64)
    i = np.asarray(int_out, dtype=np.float64)
    if f.shape != i.shape:
        raise ValueError(f"output shapes differ: float {f.shape} vs integer {i.shape}")
    agreement = None
    if mode == REGRESS:
        test = dequantize(int_out, ratio)
    elif mode == CLASSIFY:
        f = f * float(ratio)
        peak = peak * float(ratio)
        test = i
        agreement = float(np.mean(np.argmax(f, axis=1) == np.argmax(i, axis=1)))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    err = np.abs(f - test)
    return Comparison(float(err.max(initial=0.0)), float(err.mean()) if err.size else 0.0,
                      psnr(f, test, peak), agreement)


def input_peak(net: Network) -> float:
    """Float span of a raw uint8 image after re-normalization."""
    return float(256 / net.input_ratio)


def run_both(net: Network, model: IntegerModel, raws: Iterable[np.ndarray], threads: int = 1):
    """Float and integer outputs, stacked over all inputs."""
    f_out, i_out = [], []
    for raw in raws:
        raw = np.asarray(raw, dtype=np.uint8)
        f, _ = forward_f32(net, float_input(raw, net.input_ratio))
        i, ratio = forward_int(model, raw, threads=threads)
        f_out.append(f)
        i_out.append(i)
    return np.concatenate(f_out), np.concatenate(i_out), model.output_ratio


def equivalence_psnr(net: Network, model: IntegerModel, raws: Sequence[np.ndarray], peak: float | None = None) -> float:
    f, i, ratio = run_both(net, model, raws)
    return compare_outputs(f, i, ratio, REGRESS, input_peak(net) if peak is None else peak).psnr


def reference_network(net: Network, bounds: Mapping[str, float]) -> Network:
    """The float network the conversion aims at: BN folded, BReLUs at h_rf."""
    return with_bounds(fold_network(net), bounds)


def bit_depth_sweep(net: Network, bounds: Mapping[str, float], raws: Sequence[np.ndarray],
                    bits: Sequence[int] = (8, 7, 6, 5, 4), **cfg) -> dict[int, float]:
    """Equivalence PSNR of the conversion at each activation bit-depth."""
    ref = reference_network(net, bounds)
    out = {}
    for b in bits:
        conv = convert_network(net, dict(bounds), PipelineConfig(activation_bits=b, **cfg))
        out[b] = equivalence_psnr(ref, conv.model, raws)
    return out


def ideal_quantizer_psnr(step: float, peak: float) -> float:
    """PSNR of a uniform quantizer with the given step on a signal of span ``peak``."""
    return 10.0 * math.log10(peak * peak / (step * step / 12.0))
