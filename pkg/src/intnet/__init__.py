"""Post-training integer conversion of small CNNs with bounded ReLUs."""

from .calibration import (CalibrationError, NSigmaCalibrator, calibrate_nsigma, geometric_bounds_for,
                          geometric_progression_bounds, scan_max_abs, tail_fraction)
from .float_engine import brelu_f32, conv2d_f32, forward_f32
from .int_engine import AccumulatorOverflow, brelu_requant, concat_i8, conv2d_i8, forward_int, residual_add_i32
from .network import (ADD, BRELU, CONCAT, CONV, INPUT, RESCALE, BatchNorm, CycleError, IntegerModel, Layer,
                      Network, QuantRecord, ValidationError, topo_order)
from .pipeline import Conversion, PipelineConfig, convert_network
from .quantizer import (MulShift, QuantizationError, derive_mul_shift, discretize_weights, fold_batchnorm,
                        quantize_weights, renormalize_input, sync_concat, sync_residual)
from .serialize import ModelFormatError, load_model, save_model
from .tensor import Kind, decode_tensor, encode_tensor, round_half_away, saturate

__all__ = [
    "CalibrationError",
    "NSigmaCalibrator",
    "calibrate_nsigma",
    "geometric_bounds_for",
    "geometric_progression_bounds",
    "scan_max_abs",
    "tail_fraction",
    "brelu_f32",
    "conv2d_f32",
    "forward_f32",
    "AccumulatorOverflow",
    "brelu_requant",
    "concat_i8",
    "conv2d_i8",
    "forward_int",
    "residual_add_i32",
    "ADD",
    "BRELU",
    "CONCAT",
    "CONV",
    "INPUT",
    "RESCALE",
    "BatchNorm",
    "CycleError",
    "IntegerModel",
    "Layer",
    "Network",
    "QuantRecord",
    "ValidationError",
    "topo_order",
    "Conversion",
    "PipelineConfig",
    "convert_network",
    "MulShift",
    "QuantizationError",
    "derive_mul_shift",
    "discretize_weights",
    "fold_batchnorm",
    "quantize_weights",
    "renormalize_input",
    "sync_concat",
    "sync_residual",
    "ModelFormatError",
    "load_model",
    "save_model",
    "Kind",
    "decode_tensor",
    "encode_tensor",
    "round_half_away",
    "saturate",
]

__version__ = "0.1.0"
