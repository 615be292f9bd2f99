"""Static (PTQ) and dynamic (DQ) per-tensor uint8 quantization.

PTQ rewrites every layer whose kind is selected into a fused integer kernel:
uint8 weights, uint8 input/output with calibrated parameters, an integer
accumulator, int32 bias pre-scaled by ``s_in * s_w`` and a float64
requantization multiplier.  Values crossing between float and integer layers
are converted by the executor at the boundary.

DQ quantizes weights ahead of time and derives activation parameters from
each call's observed input range; outputs are f32.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Tuple

import numpy as np

from . import qmath
from .engine import execute
from .errors import EmptyCalibrationSet, PlanCoverageError
from .graph import WEIGHTED_KINDS, Graph, LayerKind, LayerQuant, LayerSpec
from .qmath import compute_qparams
from .tensor import DType, QuantParams, Tensor

# Kinds with an integer kernel in the executor.
QUANTIZABLE_KINDS = frozenset(WEIGHTED_KINDS | {
    LayerKind.RELU, LayerKind.RELU6, LayerKind.MAXPOOL, LayerKind.AVGPOOL,
    LayerKind.GLOBAL_AVGPOOL, LayerKind.ADD, LayerKind.FLATTEN,
})

PRESETS = {
    "efficientnet-style": frozenset({LayerKind.CONV2D, LayerKind.DEPTHWISE_CONV2D}),
    "shufflenet-style": frozenset({LayerKind.CONV2D, LayerKind.DEPTHWISE_CONV2D, LayerKind.FULLY_CONNECTED}),
    "full-graph": QUANTIZABLE_KINDS,
}


def resolve_kinds(kinds) -> frozenset:
    """Accept a preset name, a comma-separated list, or an iterable of kinds."""
    if kinds is None:
        return PRESETS["full-graph"]
    if isinstance(kinds, str):
        if kinds in PRESETS:
            return PRESETS[kinds]
        kinds = [k.strip() for k in kinds.split(",") if k.strip()]
    out = frozenset(LayerKind(k) for k in kinds)
    bad = out - QUANTIZABLE_KINDS
    if bad:
        raise ValueError(f"no quantized kernel for {sorted(k.value for k in bad)}")
    return out


def quantize_tensor(t: Tensor, qp: QuantParams) -> Tensor:
    return Tensor(qmath.quantize_array(t.data, qp), DType.U8, qp)


def dequantize_tensor(t: Tensor) -> Tensor:
    return Tensor(t.dequantize(), DType.F32)


@dataclass
class QuantPlan:
    mode: str
    quantized_kinds: frozenset
    calibration_summary: Dict[str, Tuple[float, float]] = field(default_factory=dict)
    weight_qparams: Dict[str, QuantParams] = field(default_factory=dict)

    def __post_init__(self):
        self.mode = self.mode.upper()
        self.quantized_kinds = frozenset(LayerKind(k) for k in self.quantized_kinds)
        if self.mode not in ("PTQ", "DQ"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "DQ" and self.calibration_summary:
            raise ValueError("DQ plans carry no activation calibration")

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "quantized_kinds": sorted(k.value for k in self.quantized_kinds),
            "calibration_summary": {k: [float(lo), float(hi)] for k, (lo, hi) in
                                    sorted(self.calibration_summary.items())},
            "weight_qparams": {k: v.to_dict() for k, v in sorted(self.weight_qparams.items())},
        }

    @classmethod
    def from_dict(cls, d) -> "QuantPlan":
        return cls(
            mode=d["mode"],
            quantized_kinds=d["quantized_kinds"],
            calibration_summary={k: (float(v[0]), float(v[1])) for k, v in d["calibration_summary"].items()},
            weight_qparams={k: QuantParams.from_dict(v) for k, v in d["weight_qparams"].items()},
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "QuantPlan":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _require_float(graph: Graph):
    for layer in graph.layers:
        if layer.quant is not None:
            raise ValueError(f"{graph.name}: layer {layer.name} is already quantized")


def _weight_qparams(layer: LayerSpec) -> QuantParams:
    w = layer.weights["weight"].data
    return compute_qparams(float(w.min()), float(w.max()))


def calibrate(graph: Graph, calib_set: Iterable, quantized_kinds=None) -> QuantPlan:
    """Record running (min, max) of every tensor bordering a selected layer."""
    _require_float(graph)
    kinds = resolve_kinds(quantized_kinds)
    watched = set()
    for layer in graph.layers:
        if layer.kind in kinds:
            watched.update(layer.inputs)
            watched.add(layer.output)
    ranges: Dict[str, Tuple[float, float]] = {}
    n = 0
    for sample in calib_set:
        n += 1
        if not watched:
            continue
        env = execute(graph, sample.data if isinstance(sample, Tensor) else sample, keep_all=True)
        for name in watched:
            v = env[name]
            lo, hi = float(v.min()), float(v.max())
            if name in ranges:
                lo, hi = min(lo, ranges[name][0]), max(hi, ranges[name][1])
            ranges[name] = (lo, hi)
    if n == 0:
        raise EmptyCalibrationSet("calibration set is empty")
    wq = {layer.name: _weight_qparams(layer) for layer in graph.layers
          if layer.kind in kinds and layer.kind in WEIGHTED_KINDS and "weight" in layer.weights}
    return QuantPlan("PTQ", kinds, ranges, wq)


def _quantize_weights(layer: LayerSpec, w_qp: QuantParams, in_qp: Optional[QuantParams]) -> dict:
    w = layer.weights["weight"]
    weights = {"weight": quantize_tensor(w, w_qp)}
    b = layer.weights.get("bias")
    if b is not None:
        if in_qp is None:
            weights["bias"] = b
        else:
            bscale = in_qp.scale * w_qp.scale
            weights["bias"] = Tensor(qmath.quantize_bias(b.data, in_qp.scale, w_qp.scale), DType.I32,
                                     QuantParams(bscale, 0))
    return weights


def apply_ptq(graph: Graph, plan: QuantPlan) -> Graph:
    if plan.mode != "PTQ":
        raise ValueError("apply_ptq needs a PTQ plan")
    _require_float(graph)
    if not plan.quantized_kinds:
        return graph
    summary = plan.calibration_summary

    def qp_for(tensor, layer):
        if tensor not in summary:
            raise PlanCoverageError(f"{layer.name}: no calibration range for tensor {tensor!r}")
        return compute_qparams(*summary[tensor])

    layers = []
    for layer in graph.layers:
        if layer.kind not in plan.quantized_kinds:
            layers.append(layer)
            continue
        in_qps = tuple(qp_for(t, layer) for t in layer.inputs)
        out_qp = in_qps[0] if layer.kind is LayerKind.FLATTEN else qp_for(layer.output, layer)
        weights = layer.weights
        if layer.kind in WEIGHTED_KINDS:
            w_qp = plan.weight_qparams.get(layer.name) or _weight_qparams(layer)
            weights = _quantize_weights(layer, w_qp, in_qps[0])
        layers.append(layer.with_(weights=weights, quant=LayerQuant("ptq", in_qps, out_qp)))
    return graph.replace_layers(layers)


def apply_dq(graph: Graph, quantized_kinds=None) -> Graph:
    """Dynamic quantization.  Only weighted kinds are affected."""
    _require_float(graph)
    kinds = resolve_kinds(quantized_kinds) & WEIGHTED_KINDS
    layers = []
    for layer in graph.layers:
        if layer.kind in kinds:
            weights = _quantize_weights(layer, _weight_qparams(layer), None)
            layer = layer.with_(weights=weights, quant=LayerQuant("dq"))
        layers.append(layer)
    return graph.replace_layers(layers)


def dq_plan(graph: Graph, quantized_kinds=None) -> QuantPlan:
    """The weight-only plan ``apply_dq`` would use, for persistence."""
    kinds = resolve_kinds(quantized_kinds) & WEIGHTED_KINDS
    wq = {layer.name: _weight_qparams(layer) for layer in graph.layers if layer.kind in kinds}
    return QuantPlan("DQ", kinds, {}, wq)


def covered_weight_bytes(graph: Graph, layer_names) -> int:
    names = set(layer_names)
    return sum(layer.weight_bytes for layer in graph.layers if layer.name in names)
