"""Float-to-integer conversion driver.

The stages follow the usual order: fix the input convention, fold batch
norms and discretize weights, pick BReLU bounds (retrying with a larger n
while a user metric says the network got worse), then quantize weights
and biases. Training is out of scope; every finetune point is a hook that
defaults to doing nothing.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Mapping

import numpy as np

from .int_engine import check_overflow
from .network import (ADD, BRELU, CONCAT, CONV, INPUT, RESCALE, IntegerModel, Network,
                      QuantRecord, ValidationError)
from .quantizer import (QuantizationError, discretize_weights, fixup_brelu, fold_batchnorm,
                        mul_shift_for, quantize_bias, quantize_with_step, retarget, snap_down,
                        sync_concat, sync_residual, weight_steps)
from .tensor import round_half_away

log = logging.getLogger(__name__)

Calibration = Mapping[str, float] | Callable[[Network, float], Mapping[str, float]]
Finetune = Callable[[Network, str], Network]


def no_finetune(net: Network, stage: str) -> Network:
    return net


@dataclass
class PipelineConfig:
    activation_bits: int = 7
    n: float = 3.0
    n_step: float = 0.5
    n_cap: float = 6.0
    threshold: float = 0.0
    per_channel: bool = True
    input_ratio: Fraction | None = None
    snap_bits: int = 24

    def __post_init__(self):
        if not 4 <= self.activation_bits <= 8:
            raise ValueError("activation bit-depth must be within [4, 8]")
        if self.input_ratio is not None:
            self.input_ratio = Fraction(self.input_ratio)

    @property
    def max_int(self) -> int:
        return (1 << self.activation_bits) - 1


@dataclass
class SyncEvent:
    kind: str  # "residual" or "concat"
    layer_id: str
    detail: dict


@dataclass
class Plan:
    """Ratios and records for one choice of BReLU bounds."""

    net: Network
    records: dict[str, QuantRecord]
    events: list[SyncEvent]
    bounds: dict[str, float]


@dataclass
class Conversion:
    model: IntegerModel
    plan: Plan
    n: float | None
    score: float | None = None
    reference: float | None = None
    met: bool = True
    tried: list[tuple[float, float | None]] = field(default_factory=list)


# -- stage 3: fold and discretize ------------------------------------------------


def fold_network(net: Network) -> Network:
    out = net
    for layer in net.convs():
        if layer.bn is None:
            continue
        bn = layer.bn
        k, b = fold_batchnorm(layer.kernel, layer.bias, bn.gamma, bn.beta, bn.mean, bn.var, bn.eps)
        out = out.replace_layer(layer.replace(kernel=k, bias=b, bn=None))
    return out


def initial_steps(net: Network, per_channel: bool) -> tuple[dict[str, list[Fraction]], dict[str, list[int]]]:
    """Weight steps per conv; all-zero channels borrow the largest step."""
    steps, pruned = {}, {}
    for layer in net.convs():
        d = weight_steps(layer.kernel, per_channel)
        zero = [c for c, v in enumerate(d) if v == 0]
        if zero:
            log.warning("%s: all-zero channels %s are prune candidates", layer.id, zero)
            fill = max(d) if max(d) > 0 else Fraction(1)
            d = [fill if v == 0 else v for v in d]
        steps[layer.id], pruned[layer.id] = d, zero
    return steps, pruned


def discretize_network(net: Network, steps: Mapping[str, list[Fraction]]) -> Network:
    out = net
    for layer in net.convs():
        out = out.replace_layer(layer.replace(kernel=discretize_weights(layer.kernel, steps[layer.id])))
    return out


# -- stage 6: ratio propagation ----------------------------------------------


def _activation_ratio(net: Network, records, src: str, user: str) -> Fraction:
    if src == INPUT:
        return net.input_ratio
    if net[src].op not in (BRELU, CONCAT):
        raise ValidationError(user, f"consumes {src!r}, which is not an 8-bit activation "
                                    "(expected the input, a BReLU or a concat)")
    return records[src].ratio_v


def _sole_consumer(users, src: str, lid: str, what: str) -> None:
    if users[src] != [lid]:
        raise ValidationError(lid, f"{what} {src!r} must feed only this layer, also feeds {users[src]}")


def plan_ratios(net: Network, steps: Mapping[str, list[Fraction]], bounds: Mapping[str, float],
                cfg: PipelineConfig, pruned: Mapping[str, list[int]] | None = None) -> Plan:
    """Propagate ratios in topological order, fixing BReLUs and syncing merges."""
    max_int = cfg.max_int
    users = net.consumers()
    records: dict[str, QuantRecord] = {}
    events: list[SyncEvent] = []

    def brelu_bounds(rec: QuantRecord) -> None:
        rec.h_f = max_int / rec.ratio_v
        rec.h_i = np.array([round_half_away(rec.h_f * r) for r in rec.ratio_y], dtype=np.int64)

    def apply_branches(conv_rec: QuantRecord, synced) -> None:
        conv_rec.delta = [s.delta for s in synced]
        conv_rec.ratio_y = [s.ratio_y for s in synced]

    for lid in net.topo_order():
        layer = net[lid]
        if layer.op == CONV:
            r_in = _activation_ratio(net, records, layer.inputs[0], lid)
            delta = list(steps[lid])
            records[lid] = QuantRecord(lid, CONV, delta=delta, ratio_x=r_in,
                                       ratio_y=[r_in / d for d in delta],
                                       pruned=list((pruned or {}).get(lid, [])))
        elif layer.op == BRELU:
            src = layer.inputs[0]
            if src == INPUT or net[src].op not in (CONV, ADD):
                raise ValidationError(lid, "BReLU must follow a conv or a residual-add")
            if lid not in bounds:
                raise ValidationError(lid, "no calibrated bound for this BReLU")
            h_rf = float(bounds[lid])
            try:
                if net[src].op == CONV:
                    _sole_consumer(users, src, lid, "conv")
                    conv_rec = records[src]
                    fixes = [fixup_brelu(h_rf, r, max_int) for r in conv_rec.ratio_y]
                    synced = sync_concat([(d, r, f.ratio_v) for d, r, f in
                                          zip(conv_rec.delta, conv_rec.ratio_y, fixes)],
                                         snap_bits=cfg.snap_bits)
                    apply_branches(conv_rec, synced)
                    rec = QuantRecord(lid, BRELU, ratio_y=list(conv_rec.ratio_y),
                                      ratio_v=synced[0].ratio_v,
                                      mul=np.array([s.mul for s in synced], dtype=np.int64),
                                      shift=np.array([s.shift for s in synced], dtype=np.int64),
                                      h_ri=np.array([f.h_ri for f in fixes], dtype=np.int64))
                else:
                    r = records[src].ratio_v
                    fix = fixup_brelu(h_rf, r, max_int)
                    rec = QuantRecord(lid, BRELU, ratio_y=[r], ratio_v=fix.ratio_v,
                                      mul=np.array([fix.ms.mul], dtype=np.int64),
                                      shift=np.array([fix.ms.shift], dtype=np.int64),
                                      h_ri=np.array([fix.h_ri], dtype=np.int64))
            except QuantizationError as exc:
                raise ValidationError(lid, str(exc)) from exc
            rec.h_rf, rec.max_int = h_rf, max_int
            brelu_bounds(rec)
            records[lid] = rec
        elif layer.op == ADD:
            main, skip = layer.inputs
            if main == INPUT or net[main].op != CONV:
                raise ValidationError(lid, "the first residual input must be a conv")
            _sole_consumer(users, main, lid, "main-branch conv")
            if skip != INPUT and net[skip].op == CONV:
                # conv on the skip path: collapse it to one ratio first
                _sole_consumer(users, skip, lid, "skip conv")
                srec = records[skip]
                s_ratio = snap_down(min(srec.ratio_y), cfg.snap_bits)
                srec.delta = [srec.ratio_x / s_ratio] * len(srec.delta)
                srec.ratio_y = [s_ratio] * len(srec.delta)
                skip_kind = "conv"
            else:
                s_ratio = _activation_ratio(net, records, skip, lid)
                skip_kind = "identity"
            mrec = records[main]
            before = list(mrec.delta)
            try:
                sync = sync_residual(s_ratio, mrec.ratio_x, mrec.delta)
            except QuantizationError as exc:
                raise ValidationError(lid, str(exc)) from exc
            mrec.delta = sync.delta
            mrec.ratio_y = [sync.ratio] * len(sync.delta)
            records[lid] = QuantRecord(lid, ADD, ratio_y=[s_ratio], ratio_v=sync.ratio,
                                       mul=np.array([sync.rescale.mul], dtype=np.int64),
                                       shift=np.array([sync.rescale.shift], dtype=np.int64))
            events.append(SyncEvent("residual", lid, {
                "skip": skip, "skip_type": skip_kind, "main": main,
                "skip_ratio": s_ratio, "shared_ratio": sync.ratio,
                "mul": sync.rescale.mul, "shift": sync.rescale.shift,
                "delta_change": max(float(a / b) for a, b in zip(sync.delta, before)),
            }))
        elif layer.op == CONCAT:
            entries, owners = [], []
            for src in layer.inputs:
                if src == INPUT or net[src].op != BRELU or net[net[src].inputs[0]].op != CONV:
                    raise ValidationError(lid, f"concat input {src!r} must be a BReLU fed by a conv")
                _sole_consumer(users, src, lid, "BReLU")
                brec, crec = records[src], records[net[src].inputs[0]]
                for c in range(len(crec.delta)):
                    entries.append((crec.delta[c], crec.ratio_y[c], brec.ratio_v))
                    owners.append((src, c))
            before = {src: records[src].ratio_v for src in layer.inputs}
            try:
                synced = sync_concat(entries, snap_bits=cfg.snap_bits)
            except QuantizationError as exc:
                raise ValidationError(lid, str(exc)) from exc
            ref = synced[0].ratio_v
            for src in layer.inputs:
                brec, crec = records[src], records[net[src].inputs[0]]
                mine = [s for (o, _), s in zip(owners, synced) if o == src]
                apply_branches(crec, mine)
                brec.ratio_y = list(crec.ratio_y)
                brec.mul = np.array([s.mul for s in mine], dtype=np.int64)
                brec.shift = np.array([s.shift for s in mine], dtype=np.int64)
                brec.ratio_v = ref
                brelu_bounds(brec)
            records[lid] = QuantRecord(lid, CONCAT, ratio_v=ref)
            events.append(SyncEvent("concat", lid, {
                "branches": list(layer.inputs), "branch_ratios": before, "reference": ref}))
        elif layer.op == RESCALE:
            src = layer.inputs[0]
            target = layer.target_ratio
            if src != INPUT and net[src].op == CONV:
                _sole_consumer(users, src, lid, "conv")
                crec = records[src]
                if target is None:
                    target = snap_down(min(crec.ratio_y), cfg.snap_bits)
                synced = retarget(list(zip(crec.delta, crec.ratio_y)), target)
                apply_branches(crec, synced)
                rec = QuantRecord(lid, RESCALE, ratio_y=list(crec.ratio_y), ratio_v=target,
                                  mul=np.array([s.mul for s in synced], dtype=np.int64),
                                  shift=np.array([s.shift for s in synced], dtype=np.int64))
            else:
                r = net.input_ratio if src == INPUT else records[src].ratio_v
                ms = mul_shift_for((target or r) / r)
                rec = QuantRecord(lid, RESCALE, ratio_y=[r], ratio_v=r * ms.ratio,
                                  mul=np.array([ms.mul], dtype=np.int64),
                                  shift=np.array([ms.shift], dtype=np.int64))
            records[lid] = rec
        else:
            raise ValidationError(lid, f"unsupported op {layer.op!r}")
    out_id = net.output_id
    if net[out_id].op == CONV:
        raise ValidationError(out_id, "network must end in rescale-output, a BReLU, a concat or an add")
    return Plan(net, records, events, dict(bounds))


def brelu_network(net: Network, plan: Plan) -> Network:
    """Float network matching the integer model: final steps, h_f bounds.

    ``net`` carries continuous (folded) weights; they are discretized here.
    """
    out = net
    for layer in net.layers:
        rec = plan.records[layer.id]
        if layer.op == CONV:
            out = out.replace_layer(layer.replace(kernel=discretize_weights(layer.kernel, rec.delta)))
        elif layer.op == BRELU:
            out = out.replace_layer(layer.replace(h=float(rec.h_f)))
    return out


# -- stage 7 -----------------------------------------------------------------


def build_integer_model(net: Network, plan: Plan, cfg: PipelineConfig) -> IntegerModel:
    layers = []
    for layer in net.layers:
        rec = plan.records[layer.id]
        if layer.op == CONV:
            try:
                w_i = quantize_with_step(layer.kernel, rec.delta)
                b_i = quantize_bias(layer.bias, rec.ratio_y)
            except QuantizationError as exc:
                raise ValidationError(layer.id, str(exc)) from exc
            layers.append(layer.replace(kernel=w_i, bias=b_i, bn=None))
        elif layer.op == BRELU:
            layers.append(layer.replace(h=None))
        else:
            layers.append(layer.replace())
    inet = Network(layers, net.input_shape, net.input_ratio)
    records = {lid: rec.copy() for lid, rec in plan.records.items()}
    model = IntegerModel(inet, records, cfg.max_int, records[inet.output_id].ratio_v)
    check_overflow(model)
    model.check()
    return model


def convert_network(net: Network, calibration: Calibration, cfg: PipelineConfig | None = None, *,
                    metric: Callable[[Network], float] | None = None,
                    finetune: Finetune = no_finetune) -> Conversion:
    """Convert a pretrained float network into an IntegerModel.

    ``calibration`` is either a fixed mapping BReLU id -> h_rf or a callable
    ``(net, n) -> mapping`` such as :class:`NSigmaCalibrator`. ``metric``
    scores a float network (higher is better); the bound search keeps
    raising n while the BReLU network scores more than ``cfg.threshold``
    below the discretized network, up to ``cfg.n_cap``.

    ``finetune(net, stage)`` is called after re-normalization, after
    discretization and after the BReLU bounds are fixed. It receives the
    network with continuous weights and returns it (possibly updated).
    """
    cfg = cfg or PipelineConfig()
    net.validate()
    if cfg.input_ratio is not None:
        net = Network(list(net.layers), net.input_shape, cfg.input_ratio)
    net = finetune(net, "renormalized")

    net = fold_network(net)
    steps, pruned = initial_steps(net, cfg.per_channel)
    net = finetune(net, "discretized")
    reference = metric(discretize_network(net, steps)) if metric else None

    adaptive = callable(calibration)
    n = cfg.n
    tried = []
    best = chosen = None
    while True:
        calib_net = discretize_network(net, steps)
        bounds = dict(calibration(calib_net, n)) if adaptive else dict(calibration)
        plan = plan_ratios(calib_net, steps, bounds, cfg, pruned)
        tuned = finetune(net, "brelu")
        score = metric(brelu_network(tuned, plan)) if metric else None
        tried.append((n, score))
        current = (n, plan, score, tuned)
        if best is None or (score is not None and score > best[2]):
            best = current
        if metric is None:
            met, chosen = True, current
            break
        met = score >= reference - cfg.threshold
        if met or not adaptive:
            chosen = current
            break
        n += cfg.n_step
        if n > cfg.n_cap:
            log.warning("metric stayed below threshold up to n=%s; keeping n=%s", cfg.n_cap, best[0])
            chosen = best
            break

    chosen_n, plan, score, tuned = chosen
    model = build_integer_model(brelu_network(tuned, plan), plan, cfg)
    return Conversion(model, plan, chosen_n if adaptive else None, score, reference, met, tried)
