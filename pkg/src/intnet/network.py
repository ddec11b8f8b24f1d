"""Layer-graph representation shared by the float and integer paths."""

from __future__ import annotations

import dataclasses
import heapq
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

INPUT = "input"

CONV = "conv2d"
BRELU = "brelu"
ADD = "residual-add"
CONCAT = "concat"
RESCALE = "rescale-output"
OPS = (CONV, BRELU, ADD, CONCAT, RESCALE)

_ARITY = {CONV: (1, 1), BRELU: (1, 1), ADD: (2, 2), CONCAT: (2, None), RESCALE: (1, 1)}


class ValidationError(ValueError):
    def __init__(self, layer_id: str | None, message: str):
        prefix = f"layer {layer_id!r}: " if layer_id is not None else ""
        super().__init__(prefix + message)
        self.layer_id = layer_id


class CycleError(ValidationError):
    pass


@dataclass
class BatchNorm:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5

    def __len__(self) -> int:
        return len(self.gamma)


@dataclass
class Layer:
    """One node of the graph.

    ``inputs`` name predecessor layers; the reserved id ``"input"`` is the
    network input. For a residual-add, ``inputs[0]`` is the main branch (a
    conv whose step can be adjusted) and ``inputs[1]`` is the skip path.
    """

    id: str
    op: str
    inputs: list[str]
    kernel: np.ndarray | None = None  # OIHW
    bias: np.ndarray | None = None
    stride: int = 1
    pad: int = 0
    bn: BatchNorm | None = None
    h: float | None = None  # BReLU upper bound; None means unbounded (plain ReLU)
    target_ratio: Fraction | None = None  # rescale-output

    def replace(self, **changes) -> "Layer":
        return dataclasses.replace(self, **changes)

    @property
    def out_channels(self) -> int:
        return int(self.kernel.shape[0])


@dataclass
class Network:
    layers: list[Layer]
    input_shape: tuple[int, int, int]  # C, H, W
    input_ratio: Fraction = Fraction(1)

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.input_ratio = Fraction(self.input_ratio)

    def __getitem__(self, layer_id: str) -> Layer:
        for layer in self.layers:
            if layer.id == layer_id:
                return layer
        raise KeyError(layer_id)

    def __contains__(self, layer_id: str) -> bool:
        return any(layer.id == layer_id for layer in self.layers)

    @property
    def ids(self) -> list[str]:
        return [layer.id for layer in self.layers]

    def replace_layer(self, layer: Layer) -> "Network":
        layers = [layer if l.id == layer.id else l for l in self.layers]
        return dataclasses.replace(self, layers=layers)

    def consumers(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {INPUT: []}
        out.update({layer.id: [] for layer in self.layers})
        for layer in self.layers:
            for src in layer.inputs:
                if src in out and layer.id not in out[src]:
                    out[src].append(layer.id)
        return out

    def topo_order(self) -> list[str]:
        return topo_order(self)

    @property
    def output_id(self) -> str:
        sinks = [lid for lid, users in self.consumers().items() if not users and lid != INPUT]
        if len(sinks) != 1:
            raise ValidationError(None, f"network must have exactly one output layer, found {sinks}")
        return sinks[0]

    def convs(self) -> list[Layer]:
        return [layer for layer in self.layers if layer.op == CONV]

    def validate(self) -> dict[str, tuple[int, int, int]]:
        """Check every structural invariant; return inferred CHW shapes."""
        seen = set()
        for layer in self.layers:
            if layer.id == INPUT:
                raise ValidationError(layer.id, "'input' is a reserved id")
            if layer.id in seen:
                raise ValidationError(layer.id, "duplicate layer id")
            seen.add(layer.id)
            if layer.op not in OPS:
                raise ValidationError(layer.id, f"unknown op {layer.op!r}")
            lo, hi = _ARITY[layer.op]
            if len(layer.inputs) < lo or (hi is not None and len(layer.inputs) > hi):
                raise ValidationError(layer.id, f"{layer.op} takes {lo}..{hi or 'n'} inputs, got {len(layer.inputs)}")
        for layer in self.layers:
            for src in layer.inputs:
                if src != INPUT and src not in seen:
                    raise ValidationError(layer.id, f"unknown input {src!r}")
        if len(self.input_shape) != 3 or min(self.input_shape) <= 0:
            raise ValidationError(None, f"bad input shape {self.input_shape}")
        if self.input_ratio <= 0:
            raise ValidationError(None, "input ratio must be positive")
        order = topo_order(self)
        shapes = {INPUT: self.input_shape}
        for lid in order:
            layer = self[lid]
            shapes[lid] = _infer_shape(layer, [shapes[s] for s in layer.inputs])
        self.output_id
        return shapes


def _infer_shape(layer: Layer, in_shapes: list[tuple[int, int, int]]) -> tuple[int, int, int]:
    if layer.op == CONV:
        k, b = layer.kernel, layer.bias
        if k is None or k.ndim != 4:
            raise ValidationError(layer.id, "conv kernel must be a 4-d OIHW tensor")
        if b is None or b.ndim != 1 or len(b) != k.shape[0]:
            raise ValidationError(layer.id, "bias length must equal kernel output channels")
        if layer.stride < 1 or layer.pad < 0:
            raise ValidationError(layer.id, "stride must be >= 1 and pad >= 0")
        if layer.bn is not None:
            for name in ("gamma", "beta", "mean", "var"):
                if len(getattr(layer.bn, name)) != k.shape[0]:
                    raise ValidationError(layer.id, f"batch-norm {name} length mismatch")
        c, h, w = in_shapes[0]
        if k.shape[1] != c:
            raise ValidationError(layer.id, f"kernel expects {k.shape[1]} input channels, got {c}")
        ho = (h + 2 * layer.pad - k.shape[2]) // layer.stride + 1
        wo = (w + 2 * layer.pad - k.shape[3]) // layer.stride + 1
        if ho <= 0 or wo <= 0:
            raise ValidationError(layer.id, "kernel larger than padded input")
        return (int(k.shape[0]), ho, wo)
    if layer.op == BRELU:
        if layer.h is not None and not layer.h > 0:
            raise ValidationError(layer.id, f"BReLU upper bound must exceed 0, got {layer.h}")
        return in_shapes[0]
    if layer.op == ADD:
        if in_shapes[0] != in_shapes[1]:
            raise ValidationError(layer.id, f"residual operands differ in shape: {in_shapes}")
        return in_shapes[0]
    if layer.op == CONCAT:
        spatial = {s[1:] for s in in_shapes}
        if len(spatial) != 1:
            raise ValidationError(layer.id, f"concat inputs differ spatially: {in_shapes}")
        return (sum(s[0] for s in in_shapes), *in_shapes[0][1:])
    if layer.target_ratio is not None and layer.target_ratio <= 0:
        raise ValidationError(layer.id, "target ratio must be positive")
    return in_shapes[0]


def topo_order(net: Network) -> list[str]:
    """Kahn's algorithm; ready layers are released in ascending id order."""
    ids = {layer.id for layer in net.layers}
    indegree = {}
    users: dict[str, list[str]] = {lid: [] for lid in ids}
    for layer in net.layers:
        preds = {s for s in layer.inputs if s != INPUT}
        if layer.id in preds:
            raise CycleError(layer.id, "self-loop")
        unknown = preds - ids
        if unknown:
            raise ValidationError(layer.id, f"unknown inputs {sorted(unknown)}")
        indegree[layer.id] = len(preds)
        for p in preds:
            users[p].append(layer.id)
    ready = [lid for lid, d in indegree.items() if d == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        lid = heapq.heappop(ready)
        order.append(lid)
        for u in users[lid]:
            indegree[u] -= 1
            if indegree[u] == 0:
                heapq.heappush(ready, u)
    if len(order) != len(ids):
        stuck = sorted(ids - set(order))
        raise CycleError(stuck[0], f"cycle detected among {stuck}")
    return order


def conv_depths(net: Network) -> dict[str, int]:
    """Longest number of convolutions on any path from the input, per layer."""
    depth = {INPUT: 0}
    for lid in topo_order(net):
        layer = net[lid]
        d = max(depth[s] for s in layer.inputs)
        depth[lid] = d + 1 if layer.op == CONV else d
    return depth


# -- quantization state ------------------------------------------------------


@dataclass
class QuantRecord:
    """Per-layer quantization state; which fields are set depends on the op.

    conv: ``delta``, ``ratio_x``, ``ratio_y`` (per output channel).
    brelu: ``ratio_y`` (of its input), ``mul``/``shift``, ``ratio_v``, the
    bounds ``h_rf``/``h_f``/``h_ri``/``h_i`` and ``max_int``.
    residual-add: ``mul``/``shift`` of the skip rescale, ``ratio_y`` of the
    skip operand, ``ratio_v`` of the sum. concat: ``ratio_v``.
    rescale-output: ``ratio_y`` of its input, ``mul``/``shift``, ``ratio_v``.
    """

    layer_id: str
    op: str
    delta: list[Fraction] | None = None
    ratio_x: Fraction | None = None
    ratio_y: list[Fraction] | None = None
    ratio_v: Fraction | None = None
    mul: np.ndarray | None = None
    shift: np.ndarray | None = None
    h_rf: float | None = None
    h_f: Fraction | None = None
    h_ri: np.ndarray | None = None
    h_i: np.ndarray | None = None
    max_int: int | None = None
    pruned: list[int] = field(default_factory=list)

    @property
    def ratio_w(self) -> list[Fraction] | None:
        if self.delta is None:
            return None
        return [1 / d for d in self.delta]

    def scale(self, c: int = 0) -> Fraction:
        return Fraction(int(self.mul[c]), 1 << int(self.shift[c]))

    def copy(self) -> "QuantRecord":
        def dup(v):
            if isinstance(v, np.ndarray):
                return v.copy()
            if isinstance(v, list):
                return list(v)
            return v

        return QuantRecord(**{f.name: dup(getattr(self, f.name)) for f in dataclasses.fields(self)})


@dataclass
class IntegerModel:
    """A fully converted network: int8 kernels, int32 biases, per-layer records."""

    network: Network
    records: dict[str, QuantRecord]
    max_int: int
    output_ratio: Fraction

    @property
    def activation_bits(self) -> int:
        return (self.max_int + 1).bit_length() - 1

    def activation_dtype(self):
        return np.int8 if self.max_int <= 127 else np.int16

    def producer_ratio(self, src: str) -> Fraction:
        if src == INPUT:
            return self.network.input_ratio
        return self.records[src].ratio_v

    def check(self) -> None:
        """Raise ValidationError unless every integer-model invariant holds."""
        from .tensor import round_half_away

        net = self.network
        net.validate()
        for lid in net.topo_order():
            layer, rec = net[lid], self.records.get(lid)
            if rec is None:
                raise ValidationError(lid, "missing quantization record")
            if layer.op == CONV:
                if layer.kernel.dtype != np.int8 or layer.bias.dtype != np.int32:
                    raise ValidationError(lid, "integer conv needs int8 kernel and int32 bias")
                if np.abs(layer.kernel.astype(np.int16)).max(initial=0) > 127:
                    raise ValidationError(lid, "kernel outside [-127, 127]")
                if rec.ratio_x != self.producer_ratio(layer.inputs[0]):
                    raise ValidationError(lid, "ratio_x differs from producer ratio")
                if any(rec.ratio_x / d != ry for d, ry in zip(rec.delta, rec.ratio_y)):
                    raise ValidationError(lid, "ratio_y != ratio_x * ratio_w")
            elif layer.op == BRELU:
                src = self.records[layer.inputs[0]]
                in_ratio = src.ratio_v if net[layer.inputs[0]].op == ADD else None
                for c in range(len(rec.mul)):
                    ry = rec.ratio_y[c]
                    expected_in = in_ratio if in_ratio is not None else src.ratio_y[c]
                    if ry != expected_in:
                        raise ValidationError(lid, f"channel {c}: input ratio out of sync")
                    if ry * rec.scale(c) != rec.ratio_v:
                        raise ValidationError(lid, f"channel {c}: ratio_v != ratio_y*mul/2^shift")
                    if round_half_away(Fraction(int(rec.h_i[c]) * int(rec.mul[c]), 1 << int(rec.shift[c]))) != self.max_int:
                        raise ValidationError(lid, f"channel {c}: h_i does not requantize to max_int")
                    if int(rec.h_i[c]) != round_half_away(rec.h_f * ry):
                        raise ValidationError(lid, f"channel {c}: h_i != round(h_f*ratio_y)")
                if rec.h_f != self.max_int / rec.ratio_v:
                    raise ValidationError(lid, "h_f != max_int/ratio_v")
            elif layer.op == ADD:
                main = self.records[layer.inputs[0]]
                skip_ratio = _output_ratio_of(self, layer.inputs[1])
                shared = skip_ratio * rec.scale(0)
                if shared != rec.ratio_v or any(r != shared for r in main.ratio_y):
                    raise ValidationError(lid, "residual operands do not share one ratio")
            elif layer.op == CONCAT:
                ratios = {self.producer_ratio(s) for s in layer.inputs}
                if ratios != {rec.ratio_v}:
                    raise ValidationError(lid, "concat inputs do not share one ratio")
            elif layer.op == RESCALE:
                in_ratios = _channel_ratios_of(self, layer.inputs[0])
                for c, r in enumerate(in_ratios):
                    if r * rec.scale(c) != rec.ratio_v:
                        raise ValidationError(lid, f"channel {c}: output ratio out of sync")
        if self.output_ratio != self.records[net.output_id].ratio_v:
            raise ValidationError(net.output_id, "output ratio mismatch")


def _output_ratio_of(model: IntegerModel, src: str) -> Fraction:
    """Scalar ratio of a layer's output; per-channel conv outputs must be uniform."""
    if src == INPUT:
        return model.network.input_ratio
    rec = model.records[src]
    if model.network[src].op == CONV:
        if len(set(rec.ratio_y)) != 1:
            raise ValidationError(src, "conv output ratio is not uniform across channels")
        return rec.ratio_y[0]
    return rec.ratio_v


def _channel_ratios_of(model: IntegerModel, src: str) -> list[Fraction]:
    if src != INPUT and model.network[src].op == CONV:
        return list(model.records[src].ratio_y)
    return [_output_ratio_of(model, src)]

