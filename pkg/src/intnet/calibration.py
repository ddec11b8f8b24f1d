"""Recommended BReLU upper bounds from data (n-sigma) or from endpoints."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .float_engine import forward_f32
from .network import BRELU, CONV, INPUT, Network, conv_depths


class CalibrationError(ValueError):
    def __init__(self, layer_id: str | None, message: str):
        prefix = f"layer {layer_id!r}: " if layer_id else ""
        super().__init__(prefix + message)
        self.layer_id = layer_id


def tail_fraction(n: float) -> float:
    """One-sided standard-normal tail beyond ``n`` sigmas."""
    return 0.5 * math.erfc(n / math.sqrt(2.0))


def quantile_rank(count: int, tail: float) -> int:
    """1-based rank into the ascending sort: ceil((1 - tail) * count), clamped."""
    return min(max(math.ceil((1.0 - tail) * count), 1), count)


def batch_quantile_bound(feature_map, n: float) -> float:
    """Smallest value among the largest ``tail_fraction(n)`` share of the map."""
    values = np.asarray(feature_map).ravel()
    if values.size == 0:
        raise CalibrationError(None, "cannot take a quantile of an empty feature map")
    if not n > 0:
        raise CalibrationError(None, f"n must be positive, got {n}")
    k = quantile_rank(values.size, tail_fraction(n)) - 1
    return float(np.partition(values, k)[k])


@dataclass
class CalibrationStats:
    layer_id: str
    n: float
    quantiles: list[float] = field(default_factory=list)

    @property
    def tail_fraction(self) -> float:
        return tail_fraction(self.n)

    @property
    def h_rf(self) -> float:
        if not self.quantiles:
            raise CalibrationError(self.layer_id, "no batches recorded")
        return math.fsum(self.quantiles) / len(self.quantiles)


def collect_nsigma(net: Network, batches: Iterable[np.ndarray], n: float) -> dict[str, CalibrationStats]:
    """Per-BReLU statistics: one quantile of its pre-activation per batch."""
    brelus = [l for l in net.layers if l.op == BRELU]
    if not brelus:
        raise CalibrationError(None, "network has no BReLU layers to calibrate")
    stats = {l.id: CalibrationStats(l.id, n) for l in brelus}
    seen = 0
    for batch in batches:
        _, taps = forward_f32(net, batch, record_taps=True)
        by_id = {t.layer_id: t.values for t in taps}
        for layer in brelus:
            pre = by_id[layer.inputs[0]] if layer.inputs[0] != INPUT else np.asarray(batch)
            if not np.any(pre > 0):
                raise CalibrationError(layer.id, "pre-activation is non-positive everywhere in a batch")
            stats[layer.id].quantiles.append(batch_quantile_bound(pre, n))
        seen += 1
    if seen == 0:
        raise CalibrationError(None, "calibration needs at least one batch")
    for s in stats.values():
        if not s.h_rf > 0:
            raise CalibrationError(s.layer_id, f"recommended bound {s.h_rf} is not positive")
    return stats


def calibrate_nsigma(net: Network, batches: Iterable[np.ndarray], n: float) -> dict[str, float]:
    """Recommended bound h_rf per BReLU, averaged over batches."""
    return {lid: s.h_rf for lid, s in collect_nsigma(net, batches, n).items()}


class NSigmaCalibrator:
    """Callable form used by the conversion loop: ``(net, n) -> bounds``."""

    def __init__(self, batches: Sequence[np.ndarray]):
        self.batches = list(batches)
        self.history: dict[float, dict[str, CalibrationStats]] = {}

    def __call__(self, net: Network, n: float) -> dict[str, float]:
        stats = collect_nsigma(net, self.batches, n)
        self.history[n] = stats
        return {lid: s.h_rf for lid, s in stats.items()}


def geometric_progression_bounds(a0: float, an: float, n_layers: int) -> list[float]:
    """Interior terms a_1 .. a_{n-1} of the progression from a0 to an."""
    if not (a0 > 0 and an > 0):
        raise CalibrationError(None, "geometric progression endpoints must be positive")
    if n_layers < 2:
        raise CalibrationError(None, "need at least two layers")
    n = n_layers
    return [math.pow(an, i / n) * math.pow(a0, (n - i) / n) for i in range(1, n)]


def geometric_bounds_for(net: Network, a0: float, an: float) -> dict[str, float]:
    """Assign progression terms to BReLUs by how many convs precede them."""
    depth = conv_depths(net)
    n_layers = depth[net.output_id]
    terms = geometric_progression_bounds(a0, an, n_layers)
    bounds = {}
    for layer in net.layers:
        if layer.op != BRELU:
            continue
        d = depth[layer.id]
        if not 1 <= d <= n_layers - 1:
            raise CalibrationError(layer.id, f"BReLU at conv depth {d} has no interior progression term")
        bounds[layer.id] = terms[d - 1]
    return bounds


def scan_max_abs(net: Network, batches: Iterable[np.ndarray], layer_id: str | None = None) -> float:
    """Max |value| of a layer's output over data; defaults to the last conv."""
    if layer_id is None:
        convs = [lid for lid in net.topo_order() if net[lid].op == CONV]
        layer_id = convs[-1]
    best = 0.0
    for batch in batches:
        _, taps = forward_f32(net, batch, record_taps=True)
        vals = next(t.values for t in taps if t.layer_id == layer_id)
        best = max(best, float(np.abs(vals).max()))
    return best


def with_bounds(net: Network, bounds: Mapping[str, float]) -> Network:
    out = net
    for lid, h in bounds.items():
        out = out.replace_layer(out[lid].replace(h=float(h)))
    return out
