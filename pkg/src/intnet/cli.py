"""``intnet`` command line: calibrate, convert, infer, compare, bench.

Exit codes: 0 success, 1 usage error, 2 validation or input error,
3 compare threshold failure. Results are printed as ``key = value`` lines.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import serialize
from .calibration import (CalibrationError, NSigmaCalibrator, collect_nsigma, geometric_bounds_for,
                          scan_max_abs)
from .float_engine import forward_f32
from .int_engine import AccumulatorOverflow, forward_int
from .metrics import (CLASSIFY, REGRESS, bit_depth_sweep, compare_outputs, dequantize, input_peak,
                      psnr)
from .network import INPUT, IntegerModel, Network, ValidationError
from .pipeline import PipelineConfig, convert_network, discretize_network, fold_network, initial_steps
from .quantizer import QuantizationError, float_input
from .reports import (ReportFormatError, conversion_report, format_pairs, geometric_report,
                      nsigma_report, parse_calibration_report)
from .tensor import TensorFormatError, load_tensor, save_tensor

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_THRESHOLD = 0, 1, 2, 3


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _bits(text: str) -> int:
    b = int(text)
    if not 4 <= b <= 8:
        raise argparse.ArgumentTypeError("bit-depth must be within [4, 8]")
    return b


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _positive_float(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError("must be > 0")
    return v


def _bit_list(text: str) -> list[int]:
    return [_bits(t) for t in text.split(",") if t.strip()]


# -- data ----------------------------------------------------------------------


def load_images(data_dir, shape, seed: int | None = None) -> list[np.ndarray]:
    """Raw uint8 CHW images from ``.npy`` arrays or tensor blobs in a directory.

    A file may hold one image (HW or CHW) or a stack (NCHW). With ``seed``
    the image order is shuffled deterministically.
    """
    path = Path(data_dir)
    if not path.is_dir():
        raise InputError(f"data directory {path} does not exist")
    files = sorted(p for p in path.iterdir() if p.suffix in (".npy", ".tensor", ".bin"))
    images = []
    for f in files:
        try:
            arr = np.load(f, allow_pickle=False) if f.suffix == ".npy" else load_tensor(f)
        except (ValueError, TensorFormatError, OSError) as exc:
            raise InputError(f"{f}: {exc}") from None
        if arr.dtype != np.uint8:
            raise InputError(f"{f}: images must be uint8, got {arr.dtype}")
        if arr.ndim == 2:
            arr = arr[None]
        stack = arr[None] if arr.ndim == 3 else arr
        if stack.ndim != 4 or tuple(stack.shape[1:]) != tuple(shape):
            raise InputError(f"{f}: image shape {arr.shape} does not match model input {tuple(shape)}")
        images.extend(stack)
    if not images:
        raise InputError(f"no .npy or .tensor images in {path}")
    if seed is not None:
        order = np.random.default_rng(seed).permutation(len(images))
        images = [images[i] for i in order]
    return images


def batches_of(images, size: int, net: Network) -> list[np.ndarray]:
    return [float_input(np.stack(images[i:i + size]), net.input_ratio) for i in range(0, len(images), size)]


def _load_float(path) -> Network:
    model = serialize.load_model(path)
    if isinstance(model, IntegerModel):
        raise InputError(f"{path} is an integer model; expected a float model")
    return model


def _load_int(path) -> IntegerModel:
    model = serialize.load_model(path)
    if not isinstance(model, IntegerModel):
        raise InputError(f"{path} is a float model; expected an integer model")
    return model


def _emit(pairs, out: str | None, title: str) -> None:
    text = format_pairs(pairs, title)
    if out:
        Path(out).write_text(text)
    sys.stdout.write(text)


def _require(args, *names):
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n) is None]
    if missing:
        raise UsageError(f"{args.command} needs {', '.join(missing)}")


# -- subcommands ---------------------------------------------------------------


def _calibration_net(net: Network, per_channel: bool = True) -> Network:
    folded = fold_network(net)
    steps, _ = initial_steps(folded, per_channel)
    return discretize_network(folded, steps)


def _calibrate(args, net: Network):
    """Return a CalibrationReport for ``net`` from the CLI flags."""
    calib_net = _calibration_net(net)
    if args.method == "geometric":
        if args.an is None:
            _require(args, "data")
            images = load_images(args.data, net.input_shape, args.seed)
            an = scan_max_abs(calib_net, batches_of(images, args.batch, net))
        else:
            an = args.an
        return geometric_report(geometric_bounds_for(calib_net, args.a0, an), args.a0, an)
    _require(args, "data")
    images = load_images(args.data, net.input_shape, args.seed)
    stats = collect_nsigma(calib_net, batches_of(images, args.batch, net), args.n)
    return nsigma_report(stats, args.n)


def cmd_calibrate(args) -> int:
    _require(args, "model")
    net = _load_float(args.model)
    report = _calibrate(args, net)
    text = report.to_text()
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def _psnr_metric(net: Network, images, peak: float):
    ref_in = float_input(np.stack(images), net.input_ratio)
    reference, _ = forward_f32(fold_network(net), ref_in)

    def metric(candidate: Network) -> float:
        out, _ = forward_f32(candidate, ref_in)
        return psnr(reference, out, peak)

    return metric


def cmd_convert(args) -> int:
    _require(args, "model", "out")
    net = _load_float(args.model)
    cfg = PipelineConfig(activation_bits=args.bits, n=args.n, n_step=args.n_step, n_cap=args.n_cap,
                         threshold=args.threshold or 0.0)
    metric = None
    if args.calib:
        try:
            report = parse_calibration_report(Path(args.calib).read_text())
        except UnicodeDecodeError:
            raise ReportFormatError("calibration file is not text", 1) from None
        calibration = report.bounds
    elif args.method == "geometric":
        calibration = _calibrate(args, net).bounds
    else:
        _require(args, "data")
        images = load_images(args.data, net.input_shape, args.seed)
        calibration = NSigmaCalibrator(batches_of(images, args.batch, net))
        if args.threshold is not None:
            metric = _psnr_metric(net, images[:args.batch], input_peak(net))
    conv = convert_network(net, calibration, cfg, metric=metric)
    serialize.save_model(conv.model, args.out)
    text = conversion_report(conv)
    report_path = args.report or str(args.out) + ".report.txt"
    Path(report_path).write_text(text)
    fnet_bytes = serialize.dumps(net)
    inet_bytes = serialize.dumps(conv.model)
    f, i = serialize.size_breakdown(fnet_bytes), serialize.size_breakdown(inet_bytes)
    pairs = [("int_model", args.out), ("report", report_path),
             ("float_weight_payload", f.weight_payload), ("int_weight_payload", i.weight_payload),
             ("weight_payload_ratio", i.weight_payload / f.weight_payload),
             ("int_metadata_fraction", i.metadata_fraction),
             ("sync_events", len(conv.plan.events))]
    sys.stdout.write(format_pairs(pairs, "intnet convert"))
    return EXIT_OK


def cmd_infer(args) -> int:
    _require(args, "int_model", "data", "out")
    model = _load_int(args.int_model)
    net = model.network
    images = load_images(args.data, net.input_shape, None)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    trace_dir = Path(args.trace) if args.trace else None
    for idx, raw in enumerate(images):
        out, ratio, values = forward_int(model, raw, threads=args.threads, trace=True)
        if args.mode == REGRESS:
            save_tensor(out_dir / f"out_{idx:04d}.tensor", dequantize(out, ratio).astype(np.float32))
        else:
            save_tensor(out_dir / f"out_{idx:04d}.tensor", np.ascontiguousarray(out))
        if trace_dir is not None:
            sub = trace_dir / f"{idx:04d}"
            sub.mkdir(parents=True, exist_ok=True)
            for lid, v in values.items():
                name = "input" if lid == INPUT else lid
                save_tensor(sub / f"{name}.tensor", np.ascontiguousarray(v))
    pairs = [("images", len(images)), ("output_ratio", model.output_ratio), ("mode", args.mode),
             ("out", str(out_dir))]
    if trace_dir is not None:
        pairs.append(("trace", str(trace_dir)))
    sys.stdout.write(format_pairs(pairs, "intnet infer"))
    return EXIT_OK


def cmd_compare(args) -> int:
    _require(args, "model", "data")
    net = _load_float(args.model)
    images = load_images(args.data, net.input_shape, args.seed)
    peak = input_peak(net)
    pairs = []
    status = EXIT_OK
    if args.int_model:
        model = _load_int(args.int_model)
        if model.network.input_shape != net.input_shape:
            raise InputError(f"input shapes differ: float {net.input_shape} vs integer {model.network.input_shape}")
        # the float side runs with the BReLU bounds the integer model was built from
        ref = net
        for lid, rec in model.records.items():
            if rec.h_rf is not None and lid in ref:
                ref = ref.replace_layer(ref[lid].replace(h=rec.h_rf))
        ref = fold_network(ref)
        f_out, i_out = [], []
        for raw in images:
            f, _ = forward_f32(ref, float_input(raw, net.input_ratio))
            i, ratio = forward_int(model, raw, threads=args.threads)
            f_out.append(f)
            i_out.append(i)
        f_all, i_all = np.concatenate(f_out), np.concatenate(i_out)
        if f_all.shape != i_all.shape:
            raise InputError(f"output shapes differ: float {f_all.shape} vs integer {i_all.shape}")
        result = compare_outputs(f_all, i_all, model.output_ratio, args.mode, peak)
        pairs += [("images", len(images)), ("mode", args.mode), ("output_ratio", model.output_ratio)]
        pairs += list(result.as_dict().items())
        pairs.append(("min_psnr_db", args.min_psnr))
        passed = result.psnr >= args.min_psnr
        pairs.append(("pass", passed))
        if not passed:
            status = EXIT_THRESHOLD
    if args.sweep:
        _require(args, "calib")
        if not args.sweep:
            raise UsageError("--sweep needs at least one bit-depth")
        bounds = parse_calibration_report(Path(args.calib).read_text()).bounds
        sweep = bit_depth_sweep(net, bounds, images, args.sweep)
        for b in args.sweep:
            pairs.append((f"sweep.bits_{b}.psnr_db", sweep[b]))
        ordered = sorted(args.sweep, reverse=True)
        mono = all(sweep[a] >= sweep[b] for a, b in zip(ordered, ordered[1:]))
        pairs.append(("sweep.monotone", mono))
    if not pairs:
        raise UsageError("compare needs --int-model or --sweep")
    _emit(pairs, args.out, "intnet compare")
    return status


def cmd_bench(args) -> int:
    if args.model is None and args.int_model is None:
        raise UsageError("bench needs --model and/or --int-model")
    rng = np.random.default_rng(args.seed)
    fnet = _load_float(args.model) if args.model else None
    model = _load_int(args.int_model) if args.int_model else None
    shape = (model.network if model else fnet).input_shape
    raw = rng.integers(0, 256, size=(args.batch, *shape), dtype=np.uint8)
    pairs = [("reps", args.reps), ("batch", args.batch), ("threads", args.threads)]

    def timed(fn):
        fn()  # warmup
        times, outs = [], []
        for _ in range(args.reps):
            t0 = time.perf_counter()
            outs.append(fn())
            times.append(time.perf_counter() - t0)
        return times, outs

    if fnet is not None:
        x = float_input(raw, fnet.input_ratio)
        times, _ = timed(lambda: forward_f32(fnet, x)[0])
        pairs += [("float.mean_s", float(np.mean(times))), ("float.min_s", float(np.min(times)))]
    if model is not None:
        times, outs = timed(lambda: forward_int(model, raw, threads=args.threads)[0])
        same = all(np.array_equal(outs[0], o) and o.dtype == outs[0].dtype for o in outs)
        pairs += [("int.mean_s", float(np.mean(times))), ("int.min_s", float(np.min(times))),
                  ("int.bitwise_identical", same)]
    _emit(pairs, args.out, "intnet bench")
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--model", help="float model (.fnet)")
    common.add_argument("--int-model", help="integer model (.inet)")
    common.add_argument("--data", help="directory of uint8 .npy or .tensor images")
    common.add_argument("--method", choices=("nsigma", "geometric"), default="nsigma")
    common.add_argument("--n", type=_positive_float, default=3.0, help="sigmas for the n-sigma rule")
    common.add_argument("--n-step", type=_positive_float, default=0.5)
    common.add_argument("--n-cap", type=_positive_float, default=6.0)
    common.add_argument("--bits", type=_bits, default=7, help="activation bit-depth, 4..8")
    common.add_argument("--batch", type=_positive_int, default=50)
    common.add_argument("--a0", type=_positive_float, default=0.5)
    common.add_argument("--an", type=_positive_float)
    common.add_argument("--mode", choices=(CLASSIFY, REGRESS), default=REGRESS)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=_positive_int, default=1)
    common.add_argument("--out", help="output file or directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="intnet", description="Post-training integer conversion and inference.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("calibrate", parents=[common], help="write recommended BReLU bounds")

    p = sub.add_parser("convert", parents=[common], help="convert a float model to an integer model")
    p.add_argument("--calib", help="calibration report from 'calibrate'")
    p.add_argument("--report", help="conversion report path (default: <out>.report.txt)")
    p.add_argument("--threshold", type=float,
                   help="allowed PSNR loss versus the discretized net before raising n")

    p = sub.add_parser("infer", parents=[common], help="run the integer model on a data directory")
    p.add_argument("--trace", help="directory for per-layer integer activations")

    p = sub.add_parser("compare", parents=[common], help="float versus integer equivalence")
    p.add_argument("--min-psnr", type=float, default=40.0)
    p.add_argument("--calib", help="calibration report, needed by --sweep")
    p.add_argument("--sweep", type=_bit_list, help="comma-separated activation bit-depths, e.g. 8,7,6,5,4")

    p = sub.add_parser("bench", parents=[common], help="time float and integer forward passes")
    p.add_argument("--reps", type=_positive_int, default=5)
    return parser


COMMANDS = {
    "calibrate": cmd_calibrate,
    "convert": cmd_convert,
    "infer": cmd_infer,
    "compare": cmd_compare,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"intnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValidationError, serialize.ModelFormatError, CalibrationError, ReportFormatError,
            QuantizationError, AccumulatorOverflow, TensorFormatError, InputError) as exc:
        print(f"intnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"intnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
