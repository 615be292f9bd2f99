"""L1-norm structured filter pruning with channel-granularity rounding.

Filters are ranked by the L1 norm of their weights and the lowest-ranked ones
are physically removed, together with the matching input channels of every
downstream consumer.  Channel counts that flow into a residual ``Add`` (and
the classifier output) are left untouched by default.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Dict, List, Optional

import numpy as np

from .errors import GraphRewriteConflict, UnsupportedLayerKind
from .graph import CHANNELWISE_KINDS, Graph, LayerKind, LayerSpec
from .tensor import Tensor

PRUNABLE_KINDS = (LayerKind.CONV2D, LayerKind.FULLY_CONNECTED)


@dataclass(frozen=True)
class PruneConfig:
    pr: float = 0.0
    cg: int = 1
    protect_residual_io: bool = True

    def __post_init__(self):
        if not 0.0 <= self.pr < 1.0:
            raise ValueError(f"pruning ratio must be in [0, 1), got {self.pr}")
        if int(self.cg) != self.cg or self.cg < 1:
            raise ValueError(f"channel granularity must be a positive integer, got {self.cg}")


@dataclass
class LayerPruneInfo:
    layer: str
    original: int
    kept: int
    removed: List[int]


@dataclass
class PruneReport:
    layers: List[LayerPruneInfo] = field(default_factory=list)
    params_before: int = 0
    params_after: int = 0

    @property
    def compression_rate(self) -> float:
        return self.params_before / self.params_after

    def to_dict(self) -> dict:
        return {
            "layers": [vars(info) for info in self.layers],
            "params_before": self.params_before,
            "params_after": self.params_after,
            "compression_rate": self.compression_rate,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def l1_filter_importance(layer: LayerSpec) -> np.ndarray:
    """Sum of absolute weights per output filter (conv) or output row (dense)."""
    if layer.kind not in PRUNABLE_KINDS:
        raise UnsupportedLayerKind(f"{layer.name}: {layer.kind.value} has no filter importance")
    w = layer.weights["weight"].data.astype(np.float64)
    return np.abs(w.reshape(w.shape[0], -1)).sum(axis=1)


def rounded_keep_count(channels: int, cfg: PruneConfig) -> int:
    """Surviving channel count: nearest multiple of ``cg`` (ties up), within [cg, channels].

    ``pr == 0`` keeps every channel even when ``channels`` is not a multiple
    of ``cg``.
    """
    if channels < 1:
        raise ValueError("channels must be >= 1")
    if cfg.pr == 0:
        return channels
    ratio = (1 - Decimal(repr(cfg.pr))) * channels / cfg.cg
    k = cfg.cg * int(ratio.to_integral_value(rounding=ROUND_HALF_UP))
    return min(max(k, cfg.cg), channels)


def _trace_producers(graph: Graph, tensor: str, found: set):
    """Collect the prunable layers whose output channels reach ``tensor`` unchanged."""
    layer = graph.producer(tensor)
    if layer is None:
        return
    if layer.kind in PRUNABLE_KINDS:
        found.add(layer.name)
        return
    for src in layer.inputs:
        _trace_producers(graph, src, found)


def protected_layers(graph: Graph, cfg: PruneConfig) -> set:
    found: set = set()
    _trace_producers(graph, graph.output, found)
    if cfg.protect_residual_io:
        for layer in graph.layers:
            if layer.kind is LayerKind.ADD:
                for src in layer.inputs:
                    _trace_producers(graph, src, found)
    return found


def _take(t: Optional[Tensor], idx, axis) -> Optional[Tensor]:
    if t is None or idx is None:
        return t
    return Tensor(np.take(t.data, idx, axis=axis), t.dtype, t.quant)


def prune_structured(graph: Graph, cfg: PruneConfig):
    """Return ``(pruned_graph, report)``."""
    for layer in graph.layers:
        if layer.quant is not None:
            raise ValueError("prune before quantizing")
    protected = protected_layers(graph, cfg)
    shapes = graph.shapes
    keep: Dict[str, Optional[np.ndarray]] = {graph.input_name: None}
    report = PruneReport(params_before=graph.param_count)
    layers = []
    for layer in graph.layers:
        k = layer.kind
        a = dict(layer.attrs)
        w = dict(layer.weights)
        in_keep = keep[layer.inputs[0]]
        out_keep = None
        if k in PRUNABLE_KINDS:
            n_out = a["out_channels"] if k is LayerKind.CONV2D else a["out_features"]
            if in_keep is not None:
                w["weight"] = _take(w.get("weight"), in_keep, 1)
                a["in_channels" if k is LayerKind.CONV2D else "in_features"] = len(in_keep)
            n_keep = n_out if layer.name in protected else rounded_keep_count(n_out, cfg)
            removed: List[int] = []
            if n_keep < n_out:
                order = np.argsort(-l1_filter_importance(layer), kind="stable")
                kept = np.sort(order[:n_keep])
                removed = sorted(int(i) for i in order[n_keep:])
                w["weight"] = _take(w["weight"], kept, 0)
                w["bias"] = _take(w.get("bias"), kept, 0)
                a["out_channels" if k is LayerKind.CONV2D else "out_features"] = n_keep
                out_keep = kept
            report.layers.append(LayerPruneInfo(layer.name, n_out, n_keep, removed))
        elif k is LayerKind.DEPTHWISE_CONV2D:
            if in_keep is not None:
                m = a.get("multiplier", 1)
                out_keep = np.array([c * m + j for c in in_keep for j in range(m)], dtype=np.int64)
                w["weight"] = _take(w.get("weight"), out_keep, 0)
                w["bias"] = _take(w.get("bias"), out_keep, 0)
                a["channels"] = len(in_keep)
        elif k is LayerKind.BATCHNORM_FOLDED:
            if in_keep is not None:
                w["scale"] = _take(w.get("scale"), in_keep, 0)
                w["shift"] = _take(w.get("shift"), in_keep, 0)
                a["channels"] = len(in_keep)
            out_keep = in_keep
        elif k in CHANNELWISE_KINDS or k is LayerKind.SOFTMAX:
            out_keep = in_keep
        elif k is LayerKind.FLATTEN:
            if in_keep is not None:
                s = shapes[layer.inputs[0]]
                hw = int(np.prod(s[2:])) if len(s) > 2 else 1
                out_keep = (np.asarray(in_keep)[:, None] * hw + np.arange(hw)[None, :]).ravel()
        elif k is LayerKind.ADD:
            kb = keep[layer.inputs[1]]
            if (in_keep is None) != (kb is None) or (in_keep is not None and not np.array_equal(in_keep, kb)):
                raise GraphRewriteConflict(f"{layer.name}: residual inputs keep different channels")
            out_keep = in_keep
        w = {key: t for key, t in w.items() if t is not None}
        keep[layer.output] = out_keep
        layers.append(layer.with_(attrs=a, weights=w))
    pruned = graph.replace_layers(layers)
    report.params_after = pruned.param_count
    return pruned, report


def prune_unstructured_mask(graph: Graph, pr: float):
    """Zero every conv/dense weight whose magnitude is strictly below the global
    ``pr``-quantile (lower interpolation) of weight magnitudes.

    Architecture and parameter count are unchanged.  Returns
    ``(masked_graph, sparsity)`` where sparsity is the fraction of exactly-zero
    weights among the masked tensors.
    """
    if not 0.0 <= pr < 1.0:
        raise ValueError(f"pruning ratio must be in [0, 1), got {pr}")
    targets = [layer for layer in graph.layers
               if layer.kind in (LayerKind.CONV2D, LayerKind.DEPTHWISE_CONV2D, LayerKind.FULLY_CONNECTED)
               and "weight" in layer.weights]
    if any(layer.quant is not None for layer in targets):
        raise ValueError("mask before quantizing")
    if not targets:
        return graph, 0.0
    mags = np.concatenate([np.abs(layer.weights["weight"].data.ravel()) for layer in targets])
    threshold = np.quantile(mags, pr, method="lower")
    names = {layer.name for layer in targets}
    new_layers = []
    zeros = 0
    for layer in graph.layers:
        if layer.name in names:
            w = layer.weights["weight"].data
            masked = np.where(np.abs(w) < threshold, np.float32(0), w)
            zeros += int(np.count_nonzero(masked == 0))
            layer = layer.with_(weights={**layer.weights, "weight": Tensor(masked)})
        new_layers.append(layer)
    return graph.replace_layers(new_layers), zeros / mags.size
