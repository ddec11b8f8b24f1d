"""Machine-readable text reports: one ``key = value`` pair per line.

Lines starting with ``#`` are comments. Layer keys look like
``layer.<id>.<field>``; list values are comma separated.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping

from .calibration import CalibrationStats, tail_fraction
from .network import ADD, BRELU, CONCAT, CONV, RESCALE
from .pipeline import Conversion


class ReportFormatError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, Fraction):
        return f"{v.numerator}/{v.denominator}"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ", ".join(_fmt(x) for x in v)
    return str(v)


def format_pairs(pairs, title: str | None = None) -> str:
    lines = [f"# {title}"] if title else []
    lines += [f"{k} = {_fmt(v)}" for k, v in pairs]
    return "\n".join(lines) + "\n"


def parse_pairs(text: str) -> list[tuple[str, str]]:
    out, seen = [], set()
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key or " " in key:
            raise ReportFormatError(f"expected 'key = value', got {raw!r}", no)
        if key in seen:
            raise ReportFormatError(f"duplicate key {key!r}", no)
        seen.add(key)
        out.append((key, value.strip()))
    return out


# -- calibration -------------------------------------------------------------


@dataclass
class CalibrationReport:
    method: str
    bounds: dict[str, float]
    n: float | None = None
    a0: float | None = None
    an: float | None = None
    quantiles: dict[str, list[float]] = field(default_factory=dict)

    @property
    def tail_fraction(self) -> float | None:
        return None if self.n is None else tail_fraction(self.n)

    def to_text(self) -> str:
        pairs = [("method", self.method)]
        if self.n is not None:
            pairs += [("n", float(self.n)), ("tail_fraction", self.tail_fraction)]
        if self.a0 is not None:
            pairs += [("a0", float(self.a0)), ("an", float(self.an))]
        pairs.append(("layers", len(self.bounds)))
        for lid, h in self.bounds.items():
            if lid in self.quantiles:
                pairs.append((f"layer.{lid}.quantiles", [float(q) for q in self.quantiles[lid]]))
            pairs.append((f"layer.{lid}.h_rf", float(h)))
        return format_pairs(pairs, "intnet calibration report")


def nsigma_report(stats: Mapping[str, CalibrationStats], n: float) -> CalibrationReport:
    return CalibrationReport("nsigma", {lid: s.h_rf for lid, s in stats.items()}, n=n,
                             quantiles={lid: list(s.quantiles) for lid, s in stats.items()})


def geometric_report(bounds: Mapping[str, float], a0: float, an: float) -> CalibrationReport:
    return CalibrationReport("geometric", dict(bounds), a0=a0, an=an)


def _float(value: str, no: int) -> float:
    try:
        return float(value)
    except ValueError:
        raise ReportFormatError(f"not a number: {value!r}", no) from None


def parse_calibration_report(text: str) -> CalibrationReport:
    pairs = parse_pairs(text)
    lines = {}
    no = 0
    for no, raw in enumerate(text.splitlines(), 1):
        key = raw.partition("=")[0].strip()
        if key and not key.startswith("#"):
            lines[key] = no
    kv = dict(pairs)
    if "method" not in kv:
        raise ReportFormatError("missing 'method'", 1)
    method = kv["method"]
    if method not in ("nsigma", "geometric"):
        raise ReportFormatError(f"unknown method {method!r}", lines["method"])
    report = CalibrationReport(method, {})
    for key in ("n", "a0", "an"):
        if key in kv:
            setattr(report, key, _float(kv[key], lines[key]))
    for key, value in pairs:
        if not key.startswith("layer."):
            continue
        lid, _, name = key[len("layer."):].rpartition(".")
        if not lid:
            raise ReportFormatError(f"malformed layer key {key!r}", lines[key])
        if name == "h_rf":
            h = _float(value, lines[key])
            if not h > 0:
                raise ReportFormatError(f"h_rf must be positive, got {value}", lines[key])
            report.bounds[lid] = h
        elif name == "quantiles":
            report.quantiles[lid] = [_float(v, lines[key]) for v in value.split(",")]
        else:
            raise ReportFormatError(f"unknown layer field {name!r}", lines[key])
    if not report.bounds:
        raise ReportFormatError("no layer bounds in report", no)
    if "layers" in kv and int(_float(kv["layers"], lines["layers"])) != len(report.bounds):
        raise ReportFormatError("layer count does not match the listed bounds", lines["layers"])
    return report


# -- conversion --------------------------------------------------------------


def conversion_pairs(conv: Conversion) -> list[tuple[str, object]]:
    model, plan = conv.model, conv.plan
    net = model.network
    pairs = [
        ("activation_bits", model.activation_bits),
        ("max_int", model.max_int),
        ("input_ratio", net.input_ratio),
        ("output_ratio", model.output_ratio),
    ]
    if conv.n is not None:
        pairs.append(("n", float(conv.n)))
    if conv.score is not None:
        pairs += [("score", conv.score), ("reference", conv.reference), ("threshold_met", conv.met)]
    for n, score in conv.tried:
        if score is not None:
            pairs.append((f"search.n_{n:g}", score))
    for lid in net.topo_order():
        rec = model.records[lid]
        key = f"layer.{lid}."
        pairs.append((key + "op", rec.op))
        if rec.op == CONV:
            pairs += [(key + "delta_min", float(min(rec.delta))), (key + "delta_max", float(max(rec.delta))),
                      (key + "ratio_x", rec.ratio_x),
                      (key + "ratio_y_min", float(min(rec.ratio_y))), (key + "ratio_y_max", float(max(rec.ratio_y))),
                      (key + "prune_candidates", rec.pruned or "none")]
        if rec.op == BRELU:
            pairs += [(key + "h_rf", float(rec.h_rf)), (key + "h_f", float(rec.h_f)),
                      (key + "h_ri", [int(v) for v in rec.h_ri]), (key + "h_i", [int(v) for v in rec.h_i])]
        if rec.op in (BRELU, ADD, RESCALE):
            pairs += [(key + "mul", [int(v) for v in rec.mul]), (key + "shift", [int(v) for v in rec.shift])]
        if rec.op in (BRELU, ADD, CONCAT, RESCALE):
            pairs.append((key + "ratio_v", rec.ratio_v))
    for i, ev in enumerate(plan.events):
        key = f"sync.{i}."
        pairs += [(key + "kind", ev.kind), (key + "layer", ev.layer_id)]
        if ev.kind == "concat":
            pairs += [(key + "method", "min-ratio"), (key + "branches", ev.detail["branches"]),
                      (key + "branch_ratios", [float(r) for r in ev.detail["branch_ratios"].values()]),
                      (key + "reference", ev.detail["reference"])]
        else:
            d = ev.detail
            pairs += [(key + "main", d["main"]), (key + "skip", d["skip"]), (key + "skip_type", d["skip_type"]),
                      (key + "skip_ratio", d["skip_ratio"]), (key + "shared_ratio", d["shared_ratio"]),
                      (key + "mul", d["mul"]), (key + "shift", d["shift"]),
                      (key + "delta_change", d["delta_change"])]
    pairs.append(("sync_events", len(plan.events)))
    return pairs


def conversion_report(conv: Conversion) -> str:
    return format_pairs(conversion_pairs(conv), "intnet conversion report")
