"""``.fnet`` / ``.inet`` model files.

Layout::

    intnet-model 1 float|integer\\n
    <header byte count>\\n
    <header: one JSON object per line, model line first, then one per layer>
    <tensor blobs, back to back, referenced from the header by index>

The header is compact JSON with sorted keys so a model always serializes
to the same bytes. Rationals are written as ``"p/q"`` strings. Per-channel
rational vectors are written as a scalar plus two int64 blobs holding the
numerators and denominators of each entry divided by that scalar.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .network import BRELU, CONV, INPUT, BatchNorm, IntegerModel, Layer, Network, QuantRecord
from .tensor import TensorFormatError, decode_tensor, encode_tensor, fits_int32

MAGIC = b"intnet-model"
VERSION = 1
FLOAT_KIND = "float"
INTEGER_KIND = "integer"

_INT64_MAX = 2**63 - 1


class ModelFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def _frac(x: Fraction) -> str:
    x = Fraction(x)
    return f"{x.numerator}/{x.denominator}"


def _parse_frac(text: str) -> Fraction:
    num, sep, den = text.partition("/")
    if not sep:
        raise ValueError(f"expected p/q, got {text!r}")
    return Fraction(int(num), int(den))


class _Writer:
    def __init__(self):
        self.blobs: list[bytes] = []

    def blob(self, arr: np.ndarray) -> int:
        self.blobs.append(encode_tensor(arr))
        return len(self.blobs) - 1

    def ints(self, values) -> int:
        return self.blob(np.asarray(values, dtype=np.int64))

    def fractions(self, values: list[Fraction]) -> dict:
        scale = values[0]
        quot = [v / scale for v in values]
        if all(abs(q.numerator) <= _INT64_MAX and q.denominator <= _INT64_MAX for q in quot):
            return {"scale": _frac(scale),
                    "num": self.ints([q.numerator for q in quot]),
                    "den": self.ints([q.denominator for q in quot])}
        return {"values": [_frac(v) for v in values]}


class _Reader:
    def __init__(self, blobs: list[np.ndarray], offset: int):
        self.blobs = blobs
        self.offset = offset  # header line start, for error messages

    def blob(self, index) -> np.ndarray:
        if not isinstance(index, int) or not 0 <= index < len(self.blobs):
            raise ModelFormatError(f"bad blob reference {index!r}", self.offset)
        return self.blobs[index]

    def ints(self, index) -> np.ndarray:
        arr = self.blob(index)
        if arr.dtype != np.int64 or arr.ndim != 1:
            raise ModelFormatError("expected a 1-d int64 blob", self.offset)
        return arr

    def fractions(self, obj) -> list[Fraction]:
        if "values" in obj:
            return [_parse_frac(v) for v in obj["values"]]
        scale = _parse_frac(obj["scale"])
        num, den = self.ints(obj["num"]), self.ints(obj["den"])
        if num.shape != den.shape:
            raise ModelFormatError("rational vector parts differ in length", self.offset)
        return [scale * Fraction(int(n), int(d)) for n, d in zip(num, den)]


def _float_array(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float32)


def _layer_obj(layer: Layer, w: _Writer, integer: bool) -> dict:
    obj = {"id": layer.id, "op": layer.op, "inputs": list(layer.inputs)}
    if layer.op == CONV:
        if integer:
            kernel, bias = np.asarray(layer.kernel, np.int8), np.asarray(layer.bias, np.int32)
        else:
            kernel, bias = _float_array(layer.kernel), _float_array(layer.bias)
        obj.update(kernel=w.blob(kernel), bias=w.blob(bias), stride=int(layer.stride), pad=int(layer.pad))
        if layer.bn is not None:
            bn = layer.bn
            obj["bn"] = {"eps": float(bn.eps), **{k: w.blob(_float_array(getattr(bn, k)))
                                                 for k in ("gamma", "beta", "mean", "var")}}
    if layer.h is not None:
        obj["h"] = float(layer.h)
    if layer.target_ratio is not None:
        obj["target_ratio"] = _frac(layer.target_ratio)
    return obj


def _record_obj(rec: QuantRecord, w: _Writer, derived: bool) -> dict:
    obj = {}
    for name in ("delta", "ratio_y"):
        v = getattr(rec, name)
        if v is not None and not (derived and name == "ratio_y"):
            obj[name] = w.fractions(list(v))
    for name in ("ratio_x", "ratio_v", "h_f"):
        v = getattr(rec, name)
        if v is not None:
            obj[name] = _frac(v)
    for name in ("mul", "shift", "h_ri", "h_i"):
        v = getattr(rec, name)
        if v is not None:
            v = np.asarray(v, dtype=np.int64)
            if not fits_int32(v):
                raise ValueError(f"layer {rec.layer_id!r}: {name} does not fit int32")
            obj[name] = w.blob(v.astype(np.int32))
    if rec.h_rf is not None:
        obj["h_rf"] = float(rec.h_rf)
    if rec.max_int is not None:
        obj["max_int"] = int(rec.max_int)
    if rec.pruned:
        obj["pruned"] = [int(c) for c in rec.pruned]
    return obj


def _ratio_y_derived(net: Network, layer: Layer) -> bool:
    """Conv outputs and BReLUs right after a conv carry ratio_x / delta."""
    if layer.op == CONV:
        return True
    src = layer.inputs[0]
    return layer.op == BRELU and src != INPUT and src in net and net[src].op == CONV


def _fill_derived(net: Network, records: dict[str, QuantRecord]) -> None:
    for layer in net.layers:
        rec = records[layer.id]
        if rec.ratio_y is not None or not _ratio_y_derived(net, layer):
            continue
        conv = records[layer.id if layer.op == CONV else layer.inputs[0]]
        if conv.delta is None or conv.ratio_x is None:
            raise ValueError(f"layer {layer.id!r}: cannot derive ratio_y without delta and ratio_x")
        rec.ratio_y = [conv.ratio_x / d for d in conv.delta]


def _line(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode() + b"\n"


def dumps(model: Network | IntegerModel) -> bytes:
    """Serialize a float :class:`Network` or an :class:`IntegerModel`."""
    integer = isinstance(model, IntegerModel)
    net = model.network if integer else model
    net.validate()
    w = _Writer()
    head = {"input_shape": list(net.input_shape), "input_ratio": _frac(net.input_ratio),
            "layers": len(net.layers)}
    if integer:
        head.update(max_int=int(model.max_int), output_ratio=_frac(model.output_ratio))
    lines = []
    for layer in net.layers:
        obj = _layer_obj(layer, w, integer)
        if integer:
            obj["quant"] = _record_obj(model.records[layer.id], w, _ratio_y_derived(net, layer))
        lines.append(_line(obj))
    head["blobs"] = len(w.blobs)
    header = _line(head) + b"".join(lines)
    kind = INTEGER_KIND if integer else FLOAT_KIND
    preamble = b"%s %d %s\n%d\n" % (MAGIC, VERSION, kind.encode(), len(header))
    return preamble + header + b"".join(w.blobs)


def save_model(model: Network | IntegerModel, path) -> None:
    Path(path).write_bytes(dumps(model))


def _read_line(buf: bytes, pos: int, what: str) -> tuple[bytes, int]:
    end = buf.find(b"\n", pos)
    if end < 0:
        raise ModelFormatError(f"unterminated {what}", pos)
    return buf[pos:end], end + 1


def _parse_layer(obj: dict, r: _Reader, integer: bool) -> Layer:
    layer = Layer(id=obj["id"], op=obj["op"], inputs=list(obj["inputs"]))
    if "kernel" in obj:
        layer.kernel = r.blob(obj["kernel"])
        layer.bias = r.blob(obj["bias"])
        want = (np.int8, np.int32) if integer else (np.float32, np.float32)
        if (layer.kernel.dtype, layer.bias.dtype) != want:
            raise ModelFormatError(f"layer {layer.id!r}: unexpected kernel/bias element kinds", r.offset)
        layer.stride, layer.pad = int(obj["stride"]), int(obj["pad"])
    if "bn" in obj:
        bn = obj["bn"]
        layer.bn = BatchNorm(*(r.blob(bn[k]) for k in ("gamma", "beta", "mean", "var")), eps=float(bn["eps"]))
    if "h" in obj:
        layer.h = float(obj["h"])
    if "target_ratio" in obj:
        layer.target_ratio = _parse_frac(obj["target_ratio"])
    return layer


def _parse_record(lid: str, op: str, obj: dict, r: _Reader) -> QuantRecord:
    rec = QuantRecord(lid, op)
    for name in ("delta", "ratio_y"):
        if name in obj:
            setattr(rec, name, r.fractions(obj[name]))
    for name in ("ratio_x", "ratio_v", "h_f"):
        if name in obj:
            setattr(rec, name, _parse_frac(obj[name]))
    for name in ("mul", "shift", "h_ri", "h_i"):
        if name in obj:
            arr = r.blob(obj[name])
            if arr.dtype != np.int32 or arr.ndim != 1:
                raise ModelFormatError(f"layer {lid!r}: {name} must be a 1-d int32 blob", r.offset)
            setattr(rec, name, arr.astype(np.int64))
    if "h_rf" in obj:
        rec.h_rf = float(obj["h_rf"])
    if "max_int" in obj:
        rec.max_int = int(obj["max_int"])
    rec.pruned = [int(c) for c in obj.get("pruned", [])]
    return rec


def loads(buf: bytes, *, check: bool = True) -> Network | IntegerModel:
    """Parse model bytes; ``ModelFormatError`` carries the failing offset."""
    if not buf:
        raise ModelFormatError("empty model file", 0)
    magic, pos = _read_line(buf, 0, "magic line")
    parts = magic.split(b" ")
    if len(parts) != 3 or parts[0] != MAGIC:
        raise ModelFormatError("not an intnet model file", 0)
    if parts[1] != str(VERSION).encode():
        raise ModelFormatError(f"unsupported format version {parts[1].decode(errors='replace')!r}", len(MAGIC) + 1)
    kind = parts[2].decode(errors="replace")
    if kind not in (FLOAT_KIND, INTEGER_KIND):
        raise ModelFormatError(f"unknown model kind {kind!r}", len(MAGIC) + 3)
    integer = kind == INTEGER_KIND
    size_line, hpos = _read_line(buf, pos, "header size")
    if not size_line.isdigit():
        raise ModelFormatError("header size is not a decimal integer", pos)
    hend = hpos + int(size_line)
    if hend > len(buf):
        raise ModelFormatError("header runs past end of file", len(buf))

    objs = []
    line_pos = hpos
    while line_pos < hend:
        text, nxt = _read_line(buf[:hend], line_pos, "header line")
        try:
            obj = json.loads(text)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            col = exc.pos if isinstance(exc, json.JSONDecodeError) else exc.start
            raise ModelFormatError(f"malformed header line: {exc}", line_pos + col) from None
        if not isinstance(obj, dict):
            raise ModelFormatError("header line is not an object", line_pos)
        objs.append((line_pos, obj))
        line_pos = nxt
    if not objs:
        raise ModelFormatError("missing model line", hpos)

    head_pos, head = objs[0]
    blobs = []
    bpos = hend
    try:
        for _ in range(int(head["blobs"])):
            arr, bpos = decode_tensor(buf, bpos)
            blobs.append(arr)
    except TensorFormatError as exc:
        raise ModelFormatError(f"bad tensor blob: {exc.args[0]}", exc.offset) from None
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"bad model line: {exc}", head_pos) from None
    if bpos != len(buf):
        raise ModelFormatError("trailing bytes after last blob", bpos)

    layers, records = [], {}
    for line_pos, obj in objs[1:]:
        r = _Reader(blobs, line_pos)
        try:
            layer = _parse_layer(obj, r, integer)
            if integer:
                records[layer.id] = _parse_record(layer.id, layer.op, obj["quant"], r)
        except ModelFormatError:
            raise
        except (KeyError, TypeError, ValueError, ZeroDivisionError) as exc:
            raise ModelFormatError(f"bad layer line: {exc!r}", line_pos) from None
        layers.append(layer)
    try:
        if len(layers) != int(head["layers"]):
            raise ModelFormatError(f"model line announces {head['layers']} layers, found {len(layers)}", head_pos)
        net = Network(layers, tuple(head["input_shape"]), _parse_frac(head["input_ratio"]))
        if integer:
            _fill_derived(net, records)
        model = (IntegerModel(net, records, int(head["max_int"]), _parse_frac(head["output_ratio"]))
                 if integer else net)
    except ModelFormatError:
        raise
    except (KeyError, TypeError, ValueError, ZeroDivisionError) as exc:
        raise ModelFormatError(f"bad model line: {exc!r}", head_pos) from None
    if check:
        if integer:
            model.check()
        else:
            net.validate()
    return model


def load_model(path, *, check: bool = True) -> Network | IntegerModel:
    return loads(Path(path).read_bytes(), check=check)


@dataclass
class SizeBreakdown:
    total: int
    weight_payload: int  # kernel elements only
    tensor_payload: int  # elements of every blob
    metadata: int  # everything that is not a tensor element

    @property
    def metadata_fraction(self) -> float:
        return self.metadata / self.total


def size_breakdown(buf: bytes) -> SizeBreakdown:
    """Split serialized bytes into kernel payload, other payload and metadata."""
    model = loads(buf, check=False)
    net = model.network if isinstance(model, IntegerModel) else model
    kernel = sum(l.kernel.nbytes for l in net.convs())
    # walk the blobs again to count element bytes
    _, pos = _read_line(buf, 0, "magic line")
    size_line, hpos = _read_line(buf, pos, "header size")
    bpos = hpos + int(size_line)
    elements = 0
    while bpos < len(buf):
        arr, bpos = decode_tensor(buf, bpos)
        elements += arr.nbytes
    return SizeBreakdown(len(buf), kernel, elements, len(buf) - elements)
