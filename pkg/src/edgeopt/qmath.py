"""Affine uint8 arithmetic shared by the executor and the quantization transforms.

All rounding is half-up (``floor(v + 0.5)``) and evaluated in float64 so
results do not depend on the platform's default rounding of ties.
"""

from __future__ import annotations

import math
import sys

import numpy as np

from .errors import NonFiniteRange
from .tensor import QuantParams

QMIN, QMAX = 0, 255
I32_MIN, I32_MAX = -(2**31), 2**31 - 1


def round_half_up(v):
    if np.isscalar(v):
        return math.floor(v + 0.5)
    return np.floor(np.asarray(v, dtype=np.float64) + 0.5)


def compute_qparams(lo: float, hi: float) -> QuantParams:
    """Scale/zero-point covering ``[lo, hi]`` widened to include zero."""
    lo, hi = float(lo), float(hi)
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise NonFiniteRange(f"range ({lo}, {hi}) is not finite")
    if lo > hi:
        raise ValueError(f"min {lo} exceeds max {hi}")
    lo, hi = min(lo, 0.0), max(hi, 0.0)
    if hi == lo:
        return QuantParams(1.0, 0)
    # a subnormal range would underflow the scale to zero
    scale = max((hi - lo) / (QMAX - QMIN), sys.float_info.min)
    zp = min(max(round_half_up(-lo / scale), QMIN), QMAX)
    return QuantParams(scale, int(zp))


def quantize_array(x, qp: QuantParams) -> np.ndarray:
    v = np.floor(np.asarray(x, dtype=np.float64) / qp.scale + 0.5) + qp.zero_point
    return np.clip(v, QMIN, QMAX).astype(np.uint8)


def dequantize_array(q, qp: QuantParams, dtype=np.float32) -> np.ndarray:
    return (qp.scale * (np.asarray(q, dtype=np.float64) - qp.zero_point)).astype(dtype)


def requantize(acc, multiplier: float, zp_out: int) -> np.ndarray:
    """Map an integer accumulator to uint8 via a float64 multiplier."""
    v = np.floor(np.asarray(acc, dtype=np.float64) * multiplier + 0.5) + zp_out
    return np.clip(v, QMIN, QMAX).astype(np.uint8)


def quantize_bias(bias, input_scale: float, weight_scale: float) -> np.ndarray:
    v = np.floor(np.asarray(bias, dtype=np.float64) / (input_scale * weight_scale) + 0.5)
    return np.clip(v, I32_MIN, I32_MAX).astype(np.int32)


def observed_qparams(x) -> QuantParams:
    """Dynamic-quantization parameters from a tensor's own range."""
    x = np.asarray(x)
    return compute_qparams(float(x.min()), float(x.max()))
