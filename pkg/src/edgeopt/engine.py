"""Forward execution, softmax and MAC accounting."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _kernels as K
from . import qmath
from .errors import EmptyInput, MissingWeight, NonFiniteInput, ShapeMismatch
from .graph import Graph, LayerKind, LayerSpec, _pair
from .tensor import DType, QuantParams, Tensor


def softmax(logits) -> np.ndarray:
    """Max-shifted softmax of a 1-D vector, evaluated in float64."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1:
        raise ValueError(f"softmax expects a vector, got shape {z.shape}")
    if z.size == 0:
        raise EmptyInput("softmax of an empty vector")
    if not np.all(np.isfinite(z)):
        raise NonFiniteInput("softmax input contains NaN or inf")
    e = np.exp(z - z.max())
    return e / e.sum()


def softmax_rows(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class _QVal:
    """A uint8 activation travelling between quantized layers."""

    __slots__ = ("q", "qp")

    def __init__(self, q: np.ndarray, qp: QuantParams):
        self.q = q
        self.qp = qp


def _as_f32(v) -> np.ndarray:
    if isinstance(v, _QVal):
        return qmath.dequantize_array(v.q, v.qp)
    return v


def _as_q(v, qp: QuantParams) -> np.ndarray:
    if isinstance(v, _QVal):
        if v.qp == qp:
            return v.q
        v = qmath.dequantize_array(v.q, v.qp, np.float64)
    return qmath.quantize_array(v, qp)


def _weight(layer: LayerSpec, key: str, required=True) -> Optional[Tensor]:
    t = layer.weights.get(key)
    if t is None and required:
        raise MissingWeight(f"{layer.name}: missing weight {key!r}")
    return t


def _window(x, kernel, stride):
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride)
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::sh, ::sw]


def _maxpool(x, a, fill):
    ph, pw = _pair(a.get("padding", 0))
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=fill)
    return _window(x, a["kernel"], a.get("stride", a["kernel"])).max(axis=(-2, -1))


def _conv_args(layer: LayerSpec, channels: int):
    a = layer.attrs
    groups = channels if layer.kind is LayerKind.DEPTHWISE_CONV2D else 1
    return _pair(a.get("stride", 1)), _pair(a.get("padding", 0)), groups


def _linear_int(layer: LayerSpec, xs: np.ndarray, use_numba) -> np.ndarray:
    """Integer conv/dense on zero-point-shifted int64 operands."""
    w = _weight(layer, "weight")
    ws = w.data.astype(np.int64) - w.quant.zero_point
    if layer.kind is LayerKind.FULLY_CONNECTED:
        return K.dense(xs, ws, use_numba=use_numba)
    stride, padding, groups = _conv_args(layer, xs.shape[1])
    return K.conv2d(xs, ws, stride, padding, groups, use_numba=use_numba)


def _bias_shape(layer: LayerSpec, ndim: int):
    return (1, -1) if ndim == 2 else (1, -1, 1, 1)


def _run_float(layer: LayerSpec, xs, use_numba) -> np.ndarray:
    k = layer.kind
    a = layer.attrs
    x = xs[0]
    if k in (LayerKind.CONV2D, LayerKind.DEPTHWISE_CONV2D, LayerKind.FULLY_CONNECTED):
        w = _weight(layer, "weight").data
        if k is LayerKind.FULLY_CONNECTED:
            y = K.dense(x, w, use_numba=use_numba)
        else:
            stride, padding, groups = _conv_args(layer, x.shape[1])
            y = K.conv2d(x, w, stride, padding, groups, use_numba=use_numba)
        b = _weight(layer, "bias", required=False)
        if b is not None:
            y = y + b.data.reshape(_bias_shape(layer, y.ndim))
        return y
    if k is LayerKind.BATCHNORM_FOLDED:
        s = _weight(layer, "scale").data.reshape(1, -1, 1, 1)
        t = _weight(layer, "shift").data.reshape(1, -1, 1, 1)
        return x * s + t
    if k is LayerKind.RELU:
        return np.maximum(x, np.float32(0))
    if k is LayerKind.RELU6:
        return np.clip(x, np.float32(0), np.float32(6))
    if k is LayerKind.MAXPOOL:
        return _maxpool(x, a, -np.inf).astype(np.float32)
    if k is LayerKind.AVGPOOL:
        kh, kw = _pair(a["kernel"])
        win = _window(x, a["kernel"], a.get("stride", a["kernel"]))
        return (win.sum(axis=(-2, -1)) / np.float32(kh * kw)).astype(np.float32)
    if k is LayerKind.GLOBAL_AVGPOOL:
        hw = x.shape[2] * x.shape[3]
        return (x.sum(axis=(2, 3), keepdims=True) / np.float32(hw)).astype(np.float32)
    if k is LayerKind.ADD:
        return xs[0] + xs[1]
    if k is LayerKind.FLATTEN:
        return x.reshape(x.shape[0], -1)
    if k is LayerKind.SOFTMAX:
        return softmax_rows(x).astype(np.float32)
    raise ValueError(f"unsupported layer kind {k}")


def _run_ptq(layer: LayerSpec, vals, use_numba) -> _QVal:
    lq = layer.quant
    out_qp = lq.output
    qins = [_as_q(v, qp) for v, qp in zip(vals, lq.inputs)]
    in_qp = lq.inputs[0]
    k = layer.kind
    xs = qins[0].astype(np.int64) - in_qp.zero_point
    if k in (LayerKind.CONV2D, LayerKind.DEPTHWISE_CONV2D, LayerKind.FULLY_CONNECTED):
        acc = _linear_int(layer, xs, use_numba)
        b = _weight(layer, "bias", required=False)
        if b is not None:
            acc = acc + b.data.astype(np.int64).reshape(_bias_shape(layer, acc.ndim))
        w_scale = layer.weights["weight"].quant.scale
        q = qmath.requantize(acc, in_qp.scale * w_scale / out_qp.scale, out_qp.zero_point)
    elif k is LayerKind.RELU:
        q = qmath.requantize(np.maximum(xs, 0), in_qp.scale / out_qp.scale, out_qp.zero_point)
    elif k is LayerKind.RELU6:
        real = np.minimum(np.maximum(xs, 0) * in_qp.scale, 6.0)
        q = qmath.requantize(real, 1.0 / out_qp.scale, out_qp.zero_point)
    elif k is LayerKind.MAXPOOL:
        v = _maxpool(xs, layer.attrs, np.iinfo(np.int64).min // 2)
        q = qmath.requantize(v, in_qp.scale / out_qp.scale, out_qp.zero_point)
    elif k is LayerKind.AVGPOOL:
        a = layer.attrs
        kh, kw = _pair(a["kernel"])
        v = _window(xs, a["kernel"], a.get("stride", a["kernel"])).sum(axis=(-2, -1))
        q = qmath.requantize(v, in_qp.scale / (out_qp.scale * kh * kw), out_qp.zero_point)
    elif k is LayerKind.GLOBAL_AVGPOOL:
        hw = xs.shape[2] * xs.shape[3]
        v = xs.sum(axis=(2, 3), keepdims=True)
        q = qmath.requantize(v, in_qp.scale / (out_qp.scale * hw), out_qp.zero_point)
    elif k is LayerKind.ADD:
        b_qp = lq.inputs[1]
        ys = qins[1].astype(np.int64) - b_qp.zero_point
        real_over_s = xs * (in_qp.scale / out_qp.scale) + ys * (b_qp.scale / out_qp.scale)
        q = qmath.requantize(real_over_s, 1.0, out_qp.zero_point)
    elif k is LayerKind.FLATTEN:
        q = qmath.requantize(xs.reshape(xs.shape[0], -1), in_qp.scale / out_qp.scale, out_qp.zero_point)
    else:
        raise ValueError(f"{layer.name}: {k.value} has no quantized kernel")
    return _QVal(q, out_qp)


def _run_dq(layer: LayerSpec, vals, use_numba) -> np.ndarray:
    x = _as_f32(vals[0])
    qp = qmath.observed_qparams(x)
    xs = qmath.quantize_array(x, qp).astype(np.int64) - qp.zero_point
    acc = _linear_int(layer, xs, use_numba)
    y = acc.astype(np.float64) * (qp.scale * layer.weights["weight"].quant.scale)
    b = _weight(layer, "bias", required=False)
    if b is not None:
        y = y + b.data.astype(np.float64).reshape(_bias_shape(layer, y.ndim))
    return y.astype(np.float32)


def run_layer(layer: LayerSpec, vals, use_numba=None):
    if layer.quant is None:
        return _run_float(layer, [_as_f32(v) for v in vals], use_numba)
    if layer.quant.mode == "ptq":
        return _run_ptq(layer, vals, use_numba)
    if layer.quant.mode == "dq":
        return _run_dq(layer, vals, use_numba)
    raise ValueError(f"{layer.name}: unknown quantization mode {layer.quant.mode!r}")


def _check_input(graph: Graph, x) -> np.ndarray:
    if isinstance(x, Tensor):
        if x.dtype is not DType.F32:
            raise ShapeMismatch("graph inputs must be f32 tensors")
        x = x.data
    x = np.asarray(x, dtype=np.float32)
    want = graph.input_shape
    if x.ndim != len(want) or x.shape[1:] != want[1:]:
        raise ShapeMismatch(f"{graph.name}: input shape {x.shape} does not match {want}")
    return x


def execute(graph: Graph, x, keep_all=False, use_numba=None) -> Dict[str, np.ndarray]:
    """Run ``graph`` and return the tensor environment.

    With ``keep_all`` every intermediate tensor is returned (dequantized to
    f32); otherwise only the output is.
    """
    env = {graph.input_name: _check_input(graph, x)}
    remaining = {}
    if not keep_all:
        for layer in graph.layers:
            for i in layer.inputs:
                remaining[i] = remaining.get(i, 0) + 1
    for layer in graph.layers:
        env[layer.output] = run_layer(layer, [env[i] for i in layer.inputs], use_numba)
        if not keep_all:
            for i in layer.inputs:
                remaining[i] -= 1
                if remaining[i] == 0 and i != graph.output:
                    del env[i]
    if keep_all:
        return {k: _as_f32(v) for k, v in env.items()}
    return {graph.output: _as_f32(env[graph.output])}


def forward(graph: Graph, x, use_numba=None) -> Tensor:
    """Execute ``graph`` on ``x`` and return its terminal tensor as f32.

    Quantized outputs are dequantized at the graph boundary.
    """
    return Tensor(forward_array(graph, x, use_numba), DType.F32)


def forward_array(graph: Graph, x, use_numba=None) -> np.ndarray:
    return execute(graph, x, use_numba=use_numba)[graph.output]


@dataclass
class CostReport:
    macs_per_layer: Dict[str, int] = field(default_factory=dict)
    total_macs: int = 0
    param_count: int = 0
    serialized_bytes: int = 0

    def to_dict(self) -> dict:
        return {
            "macs_per_layer": dict(self.macs_per_layer),
            "total_macs": self.total_macs,
            "param_count": self.param_count,
            "serialized_bytes": self.serialized_bytes,
        }


def layer_macs(layer: LayerSpec, in_shape: tuple, out_shape: tuple) -> int:
    """MACs for batch size 1.  Elementwise and pooling layers count as zero."""
    k = layer.kind
    if k is LayerKind.FULLY_CONNECTED:
        return int(layer.attrs["in_features"]) * int(layer.attrs["out_features"])
    if k in (LayerKind.CONV2D, LayerKind.DEPTHWISE_CONV2D):
        kh, kw = _pair(layer.attrs["kernel"])
        cin_per_group = in_shape[1] if k is LayerKind.CONV2D else 1
        _, cout, ho, wo = out_shape
        return int(cout) * int(cin_per_group) * kh * kw * int(ho) * int(wo)
    return 0


def count_macs(graph: Graph) -> CostReport:
    from .modelio import serialize

    shapes = graph.shapes
    per_layer = {
        layer.name: layer_macs(layer, shapes[layer.inputs[0]], shapes[layer.output])
        for layer in graph.layers
    }
    return CostReport(
        macs_per_layer=per_layer,
        total_macs=sum(per_layer.values()),
        param_count=graph.param_count,
        serialized_bytes=len(serialize(graph)),
    )
