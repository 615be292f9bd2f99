"""Early-exit cascades: head construction, frozen-backbone training, gated
inference, threshold sweeps and quantize-after-partition.

A cascade is the backbone split at its exit attach points into independent
segments.  Segment ``k`` is followed by head ``k``; a sample leaves at the
first head whose prediction entropy is at most that head's threshold,
otherwise the last segment (the original classifier) answers.
"""

from __future__ import annotations

import json
import math
import os
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import metrics
from .engine import count_macs, execute, forward_array, softmax, softmax_rows
from .errors import (AttachAtTerminal, EmptyEvalSet, EmptyTrainingSet, InvalidDistribution,
                     LabelOutOfRange, NotACutPoint, UnknownAttachPoint, UntrainedHead)
from .graph import Graph, LayerKind
from .modelio import load_model, save_model, serialize
from .models import GraphBuilder
from .quant import apply_dq, apply_ptq, calibrate, resolve_kinds
from .tensor import Tensor

HEAD_PRESETS = ("simple", "block")
MANIFEST = "manifest.json"
CASCADE_FORMAT_VERSION = 1
_TINY = float(np.nextafter(0.0, 1.0))


# --------------------------------------------------------------------------- entropy

def entropy(p) -> float:
    """Natural-log entropy of a probability vector, with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0 or not np.all(np.isfinite(p)) or np.any(p < 0) \
            or abs(p.sum() - 1.0) > metrics.DIST_TOL:
        raise InvalidDistribution(f"not a probability vector: {p}")
    nz = p[p > 0]
    h = float(-np.sum(nz * np.log(nz)))
    return min(max(h, 0.0), math.log(p.size))


def logit_entropy(logits) -> float:
    """Entropy of ``softmax(logits)`` computed from log-probabilities.

    Finite logits give a strictly positive entropy, so an underflowed result
    is reported as the smallest positive double; the result never exceeds
    ``ln n``.
    """
    z = np.asarray(logits, dtype=np.float64).ravel()
    n = z.size
    if n == 1:
        return 0.0
    z = z - z.max()
    logp = z - math.log(np.exp(z).sum())
    h = float(-np.sum(np.exp(logp) * logp))
    return min(max(h, _TINY), math.log(n))


def output_probs(graph: Graph, out: np.ndarray) -> np.ndarray:
    """Class probabilities (float64) from a classifier graph's terminal rows."""
    if graph.layers and graph.layers[-1].kind is LayerKind.SOFTMAX:
        p = np.asarray(out, dtype=np.float64)
        return p / p.sum(axis=-1, keepdims=True)
    return softmax_rows(out)


# --------------------------------------------------------------------------- structure

@dataclass(frozen=True)
class ExitHead:
    attach_point: str
    preset: str
    graph: Graph
    trained: bool = False
    loss_history: tuple = ()

    @property
    def head_layers(self):
        return self.graph.layers


@dataclass(frozen=True)
class ExitPolicy:
    threshold: float
    measure: str = "entropy"

    def __post_init__(self):
        if not (self.threshold >= 0):
            raise ValueError(f"threshold must be >= 0, got {self.threshold}")
        if self.measure != "entropy":
            raise ValueError(f"unsupported confidence measure {self.measure!r}")

    def exits(self, h: float) -> bool:
        return h <= self.threshold


@dataclass(frozen=True)
class CascadeModel:
    name: str
    segments: tuple
    heads: tuple
    policies: tuple
    quantization: Optional[dict] = None

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        object.__setattr__(self, "heads", tuple(self.heads))
        object.__setattr__(self, "policies", tuple(self.policies))
        if len(self.segments) != len(self.heads) + 1 or len(self.policies) != len(self.heads):
            raise ValueError("a cascade needs one more segment than heads and one policy per head")
        for seg, head in zip(self.segments, self.heads):
            if seg.output != head.attach_point or head.graph.input_name != head.attach_point:
                raise ValueError(f"head at {head.attach_point!r} does not consume segment output {seg.output!r}")

    @property
    def num_classes(self) -> int:
        return self.segments[-1].num_classes

    @property
    def thresholds(self) -> List[float]:
        return [p.threshold for p in self.policies]

    def with_thresholds(self, thresholds) -> "CascadeModel":
        if np.isscalar(thresholds):
            thresholds = [thresholds] * len(self.heads)
        return replace(self, policies=tuple(ExitPolicy(float(t)) for t in thresholds))

    @property
    def param_count(self) -> int:
        return sum(g.param_count for g in self.segments) + sum(h.graph.param_count for h in self.heads)

    @property
    def serialized_bytes(self) -> int:
        return sum(len(serialize(g)) for g in self.segments) + sum(len(serialize(h.graph)) for h in self.heads)

    def segment_macs(self) -> List[int]:
        return [count_macs(g).total_macs for g in self.segments]

    def head_macs(self) -> List[int]:
        return [count_macs(h.graph).total_macs for h in self.heads]

    def backbone(self) -> Graph:
        """Concatenate the segments back into a single graph."""
        first, last = self.segments[0], self.segments[-1]
        layers = [layer for seg in self.segments for layer in seg.layers]
        name = first.name.rsplit(".seg", 1)[0]
        return Graph(name, first.input_name, first.input_shape, tuple(layers), last.output,
                     last.num_classes, last.ends_in_classifier)


def _cut_index(graph: Graph, tensor: str) -> int:
    """Number of layers up to and including the producer of ``tensor``."""
    if tensor == graph.output:
        raise AttachAtTerminal(f"{tensor!r} is the graph output")
    idx = next((i for i, layer in enumerate(graph.layers) if layer.output == tensor), None)
    if idx is None:
        raise UnknownAttachPoint(f"{tensor!r} is not an intermediate tensor of {graph.name}")
    k = idx + 1
    before = {graph.input_name} | {layer.output for layer in graph.layers[:k]}
    for layer in graph.layers[k:]:
        for i in layer.inputs:
            if i in before and i != tensor:
                raise NotACutPoint(f"{layer.name} consumes {i!r} across the cut at {tensor!r}")
    return k


def build_head(attach_point: str, in_shape: tuple, num_classes: int, preset="simple", seed=0,
               name="exit", block_channels: Optional[int] = None) -> Graph:
    """Untrained head; weights uniform in +-1/sqrt(fan_in)."""
    if preset not in HEAD_PRESETS:
        raise ValueError(f"unknown head preset {preset!r}; expected one of {HEAD_PRESETS}")
    b = GraphBuilder(name, in_shape, num_classes, seed, input_name=attach_point)
    if len(in_shape) == 4:
        if preset == "block":
            b.conv(block_channels or in_shape[1], kernel=3, padding=1, name=f"{name}_conv", init="uniform")
            b.relu(name=f"{name}_relu")
        b.gap(name=f"{name}_gap")
    elif preset == "block":
        raise ValueError("block heads need a 4-D attach tensor")
    b.flatten(name=f"{name}_flatten")
    b.fc(num_classes, name=f"{name}_fc")
    return b.build()


def attach_exits(graph: Graph, attach_points: Sequence[str], preset="simple", seed=0,
                 thresholds=None, block_channels=None) -> CascadeModel:
    cuts = sorted((_cut_index(graph, p), p) for p in attach_points)
    if len({c for c, _ in cuts}) != len(cuts):
        raise ValueError("attach points must be distinct")
    segments = []
    start, src = 0, graph.input_name
    for i, (k, point) in enumerate(cuts):
        segments.append(Graph(f"{graph.name}.seg{i}", src, graph.shape_of(src), graph.layers[start:k], point,
                              graph.num_classes, ends_in_classifier=False))
        start, src = k, point
    segments.append(Graph(f"{graph.name}.seg{len(cuts)}", src, graph.shape_of(src), graph.layers[start:],
                          graph.output, graph.num_classes, graph.ends_in_classifier))
    rng = np.random.default_rng(seed)
    heads = tuple(
        ExitHead(point, preset, build_head(point, graph.shape_of(point), graph.num_classes, preset,
                                           seed=int(rng.integers(2**31)), name=f"exit{i}",
                                           block_channels=block_channels))
        for i, (_, point) in enumerate(cuts)
    )
    if thresholds is None:
        thresholds = [0.0] * len(heads)
    elif np.isscalar(thresholds):
        thresholds = [thresholds] * len(heads)
    return CascadeModel(graph.name, segments, heads, tuple(ExitPolicy(float(t)) for t in thresholds))


def attach_exit(graph: Graph, attach_point: str, preset="simple", seed=0, threshold=0.0,
                block_channels=None) -> CascadeModel:
    return attach_exits(graph, [attach_point], preset, seed, [threshold], block_channels)


# --------------------------------------------------------------------------- training

def _im2col3(x):
    """(B, C, H, W) -> (B, H*W, C*9) patches for a 3x3 / pad 1 / stride 1 conv."""
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # B, C, H, W, 3, 3
    b, c, h, w = x.shape
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b, h * w, c * 9)


class HeadModel:
    """Float64 trainable copy of a head's parameters with an analytic gradient."""

    def __init__(self, head: Graph):
        self.head = head
        fc = head.layers[-1]
        self.params = {"fc_w": fc.weights["weight"].data.astype(np.float64),
                       "fc_b": fc.weights["bias"].data.astype(np.float64)}
        conv = head.layers[0] if head.layers[0].kind is LayerKind.CONV2D else None
        self.has_conv = conv is not None
        if conv is not None:
            self.params["conv_w"] = conv.weights["weight"].data.astype(np.float64)
            self.params["conv_b"] = conv.weights["bias"].data.astype(np.float64)
        self.gap = any(layer.kind is LayerKind.GLOBAL_AVGPOOL for layer in head.layers)

    def prepare(self, x: np.ndarray) -> np.ndarray:
        """Cache-able input transform that does not depend on trainable params."""
        x = np.asarray(x, dtype=np.float64)
        if self.has_conv:
            return _im2col3(x)
        if self.gap:
            return x.mean(axis=(2, 3))
        return x.reshape(x.shape[0], -1)

    def loss_and_grad(self, feats, labels, params=None, need_grad=True):
        p = self.params if params is None else params
        n = feats.shape[0]
        if self.has_conv:
            co = p["conv_w"].shape[0]
            pre = feats @ p["conv_w"].reshape(co, -1).T + p["conv_b"]
            act = np.maximum(pre, 0.0)
            g = act.mean(axis=1)
        else:
            g = feats
        logits = g @ p["fc_w"].T + p["fc_b"]
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        loss = float(-logp[np.arange(n), labels].mean())
        if not need_grad:
            return loss, None
        d = np.exp(logp)
        d[np.arange(n), labels] -= 1.0
        d /= n
        grads = {"fc_w": d.T @ g, "fc_b": d.sum(axis=0)}
        if self.has_conv:
            dg = d @ p["fc_w"]
            dpre = (dg[:, None, :] / pre.shape[1]) * (pre > 0)
            grads["conv_w"] = np.einsum("bpo,bpk->ok", dpre, feats).reshape(p["conv_w"].shape)
            grads["conv_b"] = dpre.sum(axis=(0, 1))
        return loss, grads

    def to_graph(self) -> Graph:
        layers = []
        for layer in self.head.layers:
            if layer.kind is LayerKind.FULLY_CONNECTED:
                layer = layer.with_(weights={"weight": Tensor(self.params["fc_w"]), "bias": Tensor(self.params["fc_b"])})
            elif layer.kind is LayerKind.CONV2D:
                layer = layer.with_(weights={"weight": Tensor(self.params["conv_w"]),
                                             "bias": Tensor(self.params["conv_b"])})
            layers.append(layer)
        return self.head.replace_layers(layers)


def _check_labels(labels, num_classes):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise EmptyTrainingSet("training set is empty")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise LabelOutOfRange(f"labels must lie in [0, {num_classes})")
    return labels


def sgd_fit(model: HeadModel, feats, labels, epochs, lr, seed, batch_size=32) -> list:
    """Minibatch SGD on mean cross-entropy.  Returns the full-set loss before
    training and after every epoch."""
    rng = np.random.default_rng(seed)
    n = feats.shape[0]
    history = [model.loss_and_grad(feats, labels, need_grad=False)[0]]
    for _ in range(epochs):
        order = rng.permutation(n)
        for s in range(0, n, batch_size):
            idx = order[s:s + batch_size]
            _, grads = model.loss_and_grad(feats[idx], labels[idx])
            for k, g in grads.items():
                model.params[k] -= lr * g
        history.append(model.loss_and_grad(feats, labels, need_grad=False)[0])
    return history


def fit_head(model: HeadModel, feats, labels, epochs, lr, seed, batch_size=32) -> list:
    """:func:`sgd_fit`, except that dense-only heads are trained on
    per-feature standardized inputs and the affine map is folded back into
    the dense weights afterwards.  Conv heads are trained as-is."""
    if model.has_conv:
        return sgd_fit(model, feats, labels, epochs, lr, seed, batch_size)
    mu = feats.mean(axis=0)
    sd = feats.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    w, b = model.params["fc_w"], model.params["fc_b"]
    model.params = {"fc_w": w * sd, "fc_b": b + w @ mu}
    history = sgd_fit(model, (feats - mu) / sd, labels, epochs, lr, seed, batch_size)
    wz, bz = model.params["fc_w"], model.params["fc_b"]
    model.params = {"fc_w": wz / sd, "fc_b": bz - (wz / sd) @ mu}
    return history


def _as_batch(images) -> np.ndarray:
    if isinstance(images, Tensor):
        return images.data
    if isinstance(images, (list, tuple)):
        return np.concatenate([s.data if isinstance(s, Tensor) else np.asarray(s, np.float32) for s in images])
    return np.asarray(images, dtype=np.float32)


def _unpack(dataset):
    if hasattr(dataset, "images"):
        return dataset.images, dataset.labels
    images, labels = dataset
    return _as_batch(images), np.asarray(labels)


def _segment_inputs(cascade: CascadeModel, images, chunk=256) -> list:
    """Input batches of every segment after the first (the attach tensors)."""
    outs = [[] for _ in cascade.heads]
    for s in range(0, len(images), chunk):
        x = images[s:s + chunk]
        for k, seg in enumerate(cascade.segments[:-1]):
            x = forward_array(seg, x)
            outs[k].append(x)
    return [np.concatenate(o) for o in outs]


def train_exit_heads(cascade: CascadeModel, train_set, epochs=20, lr=0.1, seed=0, batch_size=32) -> CascadeModel:
    """Train every head on its own cross-entropy with the backbone frozen.

    ``train_set`` is a Dataset or an ``(images, labels)`` pair.
    """
    images, labels = _unpack(train_set)
    labels = _check_labels(labels, cascade.num_classes)
    if epochs == 0:
        return cascade
    feats_per_head = _segment_inputs(cascade, images)
    heads = []
    for k, (head, feats) in enumerate(zip(cascade.heads, feats_per_head)):
        model = HeadModel(head.graph)
        history = fit_head(model, model.prepare(feats), labels, epochs, lr, seed + k, batch_size)
        heads.append(replace(head, graph=model.to_graph(), trained=True,
                             loss_history=tuple(head.loss_history) + tuple(history)))
    return replace(cascade, heads=tuple(heads))


def fit_classifier(graph: Graph, train_set, epochs=30, lr=0.1, seed=0, batch_size=32) -> Graph:
    """Re-fit only the final dense layer of ``graph`` on its frozen features."""
    last = graph.layers[-1]
    if last.kind is not LayerKind.FULLY_CONNECTED:
        raise ValueError("the graph must end in a FullyConnected classifier")
    images, labels = _unpack(train_set)
    labels = _check_labels(labels, graph.num_classes)
    feats = np.concatenate([execute(graph, images[s:s + 256], keep_all=True)[last.inputs[0]]
                            for s in range(0, len(images), 256)])
    head = Graph("fc", last.inputs[0], graph.shape_of(last.inputs[0]), (last,), last.output, graph.num_classes)
    model = HeadModel(head)
    fit_head(model, model.prepare(feats), labels, epochs, lr, seed, batch_size)
    return graph.replace_layers(graph.layers[:-1] + model.to_graph().layers)


# --------------------------------------------------------------------------- inference

@dataclass
class Prediction:
    probs: np.ndarray
    exit_index: int
    segment_latencies: List[float]
    macs_executed: int
    entropies: List[float] = field(default_factory=list)

    @property
    def label(self) -> int:
        return int(np.argmax(self.probs))


def _check_trained(cascade: CascadeModel, on_untrained: str):
    if on_untrained == "ignore":
        return
    for i, head in enumerate(cascade.heads):
        if not head.trained:
            msg = f"exit head {i} at {head.attach_point!r} is untrained"
            if on_untrained == "fail":
                raise UntrainedHead(msg)
            warnings.warn(msg, stacklevel=3)


def cascade_infer(cascade: CascadeModel, x, on_untrained="warn", _costs=None) -> Prediction:
    """Run one sample (batch 1) through the cascade with entropy gating."""
    _check_trained(cascade, on_untrained)
    seg_macs, head_macs = _costs or (cascade.segment_macs(), cascade.head_macs())
    x = _as_batch(x)
    if x.shape[0] != 1:
        raise ValueError("cascade inference runs with batch size 1")
    lat, ents = [], []
    macs = 0
    for k, seg in enumerate(cascade.segments):
        t0 = time.perf_counter()
        x = forward_array(seg, x)
        macs += seg_macs[k]
        if k < len(cascade.heads):
            logits = forward_array(cascade.heads[k].graph, x)[0]
            macs += head_macs[k]
            h = logit_entropy(logits)
            ents.append(h)
            lat.append(time.perf_counter() - t0)
            if cascade.policies[k].exits(h):
                return Prediction(softmax(logits), k, lat, macs, ents)
        else:
            probs = output_probs(seg, x)[0]
            lat.append(time.perf_counter() - t0)
    return Prediction(probs, len(cascade.heads), lat, macs, ents)


@dataclass
class SampleTrace:
    """Everything needed to resolve one sample under any threshold."""

    head_probs: List[np.ndarray]
    head_entropy: List[float]
    final_probs: np.ndarray
    seg_time: List[float]
    head_time: List[float]


def trace_sample(cascade: CascadeModel, x) -> SampleTrace:
    x = _as_batch(x)
    hp, he, st, ht = [], [], [], []
    for k, seg in enumerate(cascade.segments):
        t0 = time.perf_counter()
        x = forward_array(seg, x)
        st.append(time.perf_counter() - t0)
        if k < len(cascade.heads):
            t0 = time.perf_counter()
            logits = forward_array(cascade.heads[k].graph, x)[0]
            he.append(logit_entropy(logits))
            hp.append(softmax(logits))
            ht.append(time.perf_counter() - t0)
    final = output_probs(cascade.segments[-1], x)[0]
    return SampleTrace(hp, he, final, st, ht)


def trace_dataset(cascade: CascadeModel, images, threads=1) -> List[SampleTrace]:
    samples = [images[i:i + 1] for i in range(len(images))]
    if threads and threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(lambda s: trace_sample(cascade, s), samples))
    return [trace_sample(cascade, s) for s in samples]


def resolve(trace: SampleTrace, thresholds: Sequence[float]):
    """(exit_index, probs) for a traced sample under per-head thresholds."""
    for k, (h, t) in enumerate(zip(trace.head_entropy, thresholds)):
        if h <= t:
            return k, trace.head_probs[k]
    return len(trace.head_entropy), trace.final_probs


def path_cost(exit_index: int, seg_macs, head_macs) -> int:
    n_heads = len(head_macs)
    if exit_index < n_heads:
        return sum(seg_macs[:exit_index + 1]) + sum(head_macs[:exit_index + 1])
    return sum(seg_macs) + sum(head_macs)


def path_latency(trace: SampleTrace, exit_index: int) -> float:
    k = exit_index + 1
    return sum(trace.seg_time[:k]) + sum(trace.head_time[:k])


def records_for(traces, labels, thresholds, seg_macs, head_macs) -> List[metrics.EvalRecord]:
    recs = []
    n_heads = len(head_macs)
    for tr, y in zip(traces, labels):
        k, p = resolve(tr, thresholds)
        recs.append(metrics.EvalRecord(int(y), p, k, n_heads, path_latency(tr, k), path_cost(k, seg_macs, head_macs)))
    return recs


def final_only_records(traces, labels, seg_macs, head_macs) -> List[metrics.EvalRecord]:
    backbone_macs = sum(seg_macs)
    n = len(head_macs)
    return [metrics.EvalRecord(int(y), tr.final_probs, n, n, sum(tr.seg_time), backbone_macs)
            for tr, y in zip(traces, labels)]


# --------------------------------------------------------------------------- sweeps

@dataclass
class SweepPoint:
    threshold: float
    accuracy: float
    early_exit_rate: float
    expected_macs: float
    mean_latency_ms: float
    label_loyalty: float
    prob_loyalty: float
    correct: int = 0
    exits: int = 0
    total_macs: int = 0

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold, "accuracy": self.accuracy, "early_exit_rate": self.early_exit_rate,
            "expected_macs": self.expected_macs, "mean_latency_ms": self.mean_latency_ms,
            "label_loyalty": self.label_loyalty, "prob_loyalty": self.prob_loyalty,
        }


@dataclass
class SweepReport:
    grid: List[SweepPoint]
    acc_opt: int
    inf_opt: int
    budget: float
    num_samples: int
    final_only_accuracy: float
    backbone_macs: int

    @property
    def acc_opt_point(self) -> SweepPoint:
        return self.grid[self.acc_opt]

    @property
    def inf_opt_point(self) -> SweepPoint:
        return self.grid[self.inf_opt]

    def to_dict(self) -> dict:
        return {
            "num_samples": self.num_samples,
            "budget": "inf" if math.isinf(self.budget) else self.budget,
            "final_only_accuracy": self.final_only_accuracy,
            "backbone_macs": self.backbone_macs,
            "acc_opt": self.grid[self.acc_opt].to_dict(),
            "inf_opt": self.grid[self.inf_opt].to_dict(),
            "grid": [p.to_dict() for p in self.grid],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        cols = ["threshold", "accuracy", "early_exit_rate", "expected_macs", "mean_latency_ms",
                "label_loyalty", "prob_loyalty"]
        lines = [",".join(cols)]
        for p in self.grid:
            d = p.to_dict()
            lines.append(",".join(repr(float(d[c])) for c in cols))
        return "\n".join(lines) + "\n"

    def plot_data(self) -> str:
        """Whitespace-separated columns for gnuplot: T, accuracy %, exit rate %, expected MACs."""
        rows = ["# threshold accuracy_pct exit_rate_pct expected_macs"]
        rows += [f"{p.threshold!r} {p.accuracy!r} {p.early_exit_rate!r} {p.expected_macs!r}" for p in self.grid]
        return "\n".join(rows) + "\n"


def prepare_grid(grid: Sequence[float], num_classes: int) -> List[float]:
    pts = {float(t) for t in grid}
    if any(not (t >= 0) for t in pts):
        raise ValueError("thresholds must be >= 0")
    pts |= {0.0, math.log(num_classes)}
    return sorted(pts)


def select_acc_opt(grid: Sequence[SweepPoint]) -> int:
    """Max accuracy; ties -> more exits, then the smaller threshold."""
    return min(range(len(grid)), key=lambda i: (-grid[i].correct, -grid[i].exits, grid[i].threshold))


def select_inf_opt(grid: Sequence[SweepPoint], acc_opt: int, budget=math.inf) -> int:
    """Fewest expected MACs with accuracy >= acc_opt accuracy - budget;
    ties -> higher accuracy, then the smaller threshold."""
    floor = grid[acc_opt].accuracy - budget
    feasible = [i for i, p in enumerate(grid) if p.accuracy >= floor]
    return min(feasible, key=lambda i: (grid[i].total_macs, -grid[i].correct, grid[i].threshold))


def sweep_thresholds(cascade: CascadeModel, eval_set, grid: Sequence[float], budget=math.inf, threads=1,
                     traces=None) -> SweepReport:
    """Evaluate every threshold of ``grid`` (plus 0 and ln n) on ``eval_set``.

    The same threshold is applied to every head.  Each sample is traced once
    and resolved per threshold, so results match :func:`cascade_infer`.
    """
    images, labels = _unpack(eval_set)
    if len(labels) == 0:
        raise EmptyEvalSet("evaluation set is empty")
    grid = prepare_grid(grid, cascade.num_classes)
    seg_macs, head_macs = cascade.segment_macs(), cascade.head_macs()
    if traces is None:
        traces = trace_dataset(cascade, images, threads)
    base = final_only_records(traces, labels, seg_macs, head_macs)
    n = len(labels)
    points = []
    for t in grid:
        recs = records_for(traces, labels, [t] * len(cascade.heads), seg_macs, head_macs)
        correct = sum(r.predicted == r.label for r in recs)
        exits = sum(r.early for r in recs)
        total_macs = sum(r.macs for r in recs)
        points.append(SweepPoint(
            threshold=t,
            accuracy=100.0 * correct / n,
            early_exit_rate=100.0 * exits / n,
            expected_macs=total_macs / n,
            mean_latency_ms=1000.0 * sum(r.latency for r in recs) / n,
            label_loyalty=metrics.label_loyalty(recs, base),
            prob_loyalty=metrics.probability_loyalty(recs, base),
            correct=correct, exits=exits, total_macs=total_macs,
        ))
    acc = select_acc_opt(points)
    inf = select_inf_opt(points, acc, budget)
    return SweepReport(points, acc, inf, float(budget), n, metrics.accuracy(base), sum(seg_macs))


# --------------------------------------------------------------------------- quantization

def quantize_cascade(cascade: CascadeModel, mode: str, quantized_kinds=None, calib_set=None) -> CascadeModel:
    """Quantize every segment and head independently.

    Segment boundaries stay f32, so PTQ calibration for segment ``k`` uses the
    float outputs of segment ``k - 1`` on the calibration samples.
    """
    mode = mode.upper()
    kinds = resolve_kinds(quantized_kinds)
    if not kinds:
        return cascade
    if mode == "DQ":
        segments = [apply_dq(s, kinds) for s in cascade.segments]
        heads = [replace(h, graph=apply_dq(h.graph, kinds)) for h in cascade.heads]
    elif mode == "PTQ":
        if calib_set is None:
            raise ValueError("PTQ needs a calibration set")
        images = calib_set.images if hasattr(calib_set, "images") else _as_batch(calib_set)
        inputs = [images] + _segment_inputs(cascade, images)
        segments = [apply_ptq(seg, calibrate(seg, [x[i:i + 1] for i in range(len(x))], kinds))
                    for seg, x in zip(cascade.segments, inputs)]
        heads = []
        for head, x in zip(cascade.heads, inputs[1:]):
            plan = calibrate(head.graph, [x[i:i + 1] for i in range(len(x))], kinds)
            heads.append(replace(head, graph=apply_ptq(head.graph, plan)))
    else:
        raise ValueError(f"unknown quantization mode {mode!r}")
    return replace(cascade, segments=tuple(segments), heads=tuple(heads),
                   quantization={"mode": mode, "kinds": sorted(k.value for k in kinds)})


# --------------------------------------------------------------------------- persistence

def save_cascade(cascade: CascadeModel, directory) -> dict:
    """Write one model file per segment and head plus ``manifest.json``."""
    os.makedirs(directory, exist_ok=True)
    seg_files = []
    for i, seg in enumerate(cascade.segments):
        fname = f"segment{i}.eom"
        save_model(seg, os.path.join(directory, fname))
        seg_files.append(fname)
    heads = []
    for i, (head, pol) in enumerate(zip(cascade.heads, cascade.policies)):
        fname = f"head{i}.eom"
        save_model(head.graph, os.path.join(directory, fname))
        heads.append({
            "file": fname, "attach_point": head.attach_point, "preset": head.preset,
            "trained": head.trained, "loss_history": list(head.loss_history),
        })
    manifest = {
        "format": "edgeopt-cascade",
        "format_version": CASCADE_FORMAT_VERSION,
        "name": cascade.name,
        "num_classes": cascade.num_classes,
        "segments": seg_files,
        "heads": heads,
        "policy": {"measure": "entropy", "rule": "exit iff H <= T", "thresholds": cascade.thresholds},
        "quantization": cascade.quantization,
    }
    with open(os.path.join(directory, MANIFEST), "w") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest


def load_cascade(directory) -> CascadeModel:
    with open(os.path.join(directory, MANIFEST)) as fh:
        m = json.load(fh)
    if m.get("format") != "edgeopt-cascade" or m.get("format_version") != CASCADE_FORMAT_VERSION:
        raise ValueError(f"unsupported cascade manifest in {directory}")
    segments = [load_model(os.path.join(directory, f)) for f in m["segments"]]
    heads = [ExitHead(h["attach_point"], h["preset"], load_model(os.path.join(directory, h["file"])),
                      h["trained"], tuple(h.get("loss_history", ()))) for h in m["heads"]]
    policies = [ExitPolicy(float(t)) for t in m["policy"]["thresholds"]]
    return CascadeModel(m["name"], segments, heads, policies, m.get("quantization"))
