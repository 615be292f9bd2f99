"""Layer specifications, the model graph, and static shape inference.

Activations are NCHW (or NF after Flatten).  Dimension 0 is the batch axis:
the graph declares batch 1 but execution accepts any batch size.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import InvalidGraph, ShapeMismatch
from .tensor import DType, QuantParams, Tensor


class LayerKind(str, Enum):
    CONV2D = "Conv2D"
    DEPTHWISE_CONV2D = "DepthwiseConv2D"
    FULLY_CONNECTED = "FullyConnected"
    BATCHNORM_FOLDED = "BatchNormFolded"
    RELU = "ReLU"
    RELU6 = "ReLU6"
    MAXPOOL = "MaxPool"
    AVGPOOL = "AvgPool"
    GLOBAL_AVGPOOL = "GlobalAvgPool"
    ADD = "Add"
    FLATTEN = "Flatten"
    SOFTMAX = "Softmax"


WEIGHTED_KINDS = frozenset({LayerKind.CONV2D, LayerKind.DEPTHWISE_CONV2D, LayerKind.FULLY_CONNECTED})
# Kinds whose output channel c depends only on input channel c.
CHANNELWISE_KINDS = frozenset({
    LayerKind.BATCHNORM_FOLDED, LayerKind.RELU, LayerKind.RELU6, LayerKind.MAXPOOL,
    LayerKind.AVGPOOL, LayerKind.GLOBAL_AVGPOOL,
})


@dataclass(frozen=True)
class LayerQuant:
    """Quantization state of a rewritten layer.

    ``mode`` is ``"ptq"`` (static input/output parameters) or ``"dq"``
    (input parameters derived per call, f32 output).
    """

    mode: str
    inputs: Tuple[Optional[QuantParams], ...] = ()
    output: Optional[QuantParams] = None

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "inputs": [q.to_dict() if q else None for q in self.inputs],
            "output": self.output.to_dict() if self.output else None,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "LayerQuant":
        return cls(
            mode=d["mode"],
            inputs=tuple(QuantParams.from_dict(q) if q else None for q in d.get("inputs", ())),
            output=QuantParams.from_dict(d["output"]) if d.get("output") else None,
        )


def _norm_attr(v):
    if isinstance(v, (list, tuple)):
        return tuple(_norm_attr(x) for x in v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.floating):
        return float(v)
    return v


@dataclass(frozen=True, eq=False)
class LayerSpec:
    name: str
    kind: LayerKind
    inputs: Tuple[str, ...]
    output: str
    attrs: Mapping = field(default_factory=dict)
    weights: Mapping[str, Tensor] = field(default_factory=dict)
    quant: Optional[LayerQuant] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", LayerKind(self.kind))
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "attrs", {k: _norm_attr(v) for k, v in dict(self.attrs).items()})
        object.__setattr__(self, "weights", dict(self.weights))

    @property
    def param_count(self) -> int:
        return sum(t.size for t in self.weights.values())

    @property
    def weight_bytes(self) -> int:
        return sum(t.nbytes for t in self.weights.values())

    def with_(self, **changes) -> "LayerSpec":
        return replace(self, **changes)

    def __eq__(self, other):
        if not isinstance(other, LayerSpec):
            return NotImplemented
        if (self.name, self.kind, self.inputs, self.output, self.attrs, self.quant) != (
            other.name, other.kind, other.inputs, other.output, other.attrs, other.quant
        ):
            return False
        if self.weights.keys() != other.weights.keys():
            return False
        return all(self.weights[k].bit_equal(other.weights[k]) for k in self.weights)

    __hash__ = None


def _pair(v) -> Tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv_out_hw(h, w, kernel, stride, padding):
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    if ho <= 0 or wo <= 0:
        raise ShapeMismatch(f"kernel {kernel} larger than padded input {h}x{w}")
    return ho, wo


def _expect_weight(layer: LayerSpec, key: str, shape: tuple):
    t = layer.weights.get(key)
    if t is not None and tuple(t.shape) != tuple(shape):
        raise ShapeMismatch(f"{layer.name}: {key} has shape {t.shape}, expected {shape}")


def infer_layer_shape(layer: LayerSpec, in_shapes: Sequence[tuple]) -> tuple:
    """Output shape of ``layer`` given its input shapes; checks weight shapes."""
    k = layer.kind
    a = layer.attrs
    if k is LayerKind.ADD:
        if len(in_shapes) != 2:
            raise InvalidGraph(f"{layer.name}: Add takes exactly two inputs")
        if in_shapes[0] != in_shapes[1]:
            raise ShapeMismatch(f"{layer.name}: Add inputs {in_shapes[0]} vs {in_shapes[1]}")
        return in_shapes[0]
    if len(in_shapes) != 1:
        raise InvalidGraph(f"{layer.name}: {k.value} takes exactly one input")
    s = in_shapes[0]
    if k is LayerKind.FLATTEN:
        return (s[0], int(np.prod(s[1:])))
    if k is LayerKind.SOFTMAX:
        if len(s) != 2:
            raise ShapeMismatch(f"{layer.name}: Softmax expects a 2-D input, got {s}")
        return s
    if k is LayerKind.FULLY_CONNECTED:
        if len(s) != 2 or s[1] != a["in_features"]:
            raise ShapeMismatch(f"{layer.name}: expects (N, {a['in_features']}), got {s}")
        _expect_weight(layer, "weight", (a["out_features"], a["in_features"]))
        _expect_weight(layer, "bias", (a["out_features"],))
        return (s[0], a["out_features"])
    if k in (LayerKind.RELU, LayerKind.RELU6):
        return s
    if len(s) != 4:
        raise ShapeMismatch(f"{layer.name}: {k.value} expects NCHW input, got {s}")
    n, c, h, w = s
    if k is LayerKind.BATCHNORM_FOLDED:
        if c != a["channels"]:
            raise ShapeMismatch(f"{layer.name}: expects {a['channels']} channels, got {c}")
        _expect_weight(layer, "scale", (c,))
        _expect_weight(layer, "shift", (c,))
        return s
    if k is LayerKind.GLOBAL_AVGPOOL:
        return (n, c, 1, 1)
    if k in (LayerKind.MAXPOOL, LayerKind.AVGPOOL):
        pad = a.get("padding", 0)
        if k is LayerKind.AVGPOOL and _pair(pad) != (0, 0):
            raise InvalidGraph(f"{layer.name}: AvgPool supports padding=0 only")
        ho, wo = conv_out_hw(h, w, a["kernel"], a.get("stride", a["kernel"]), pad)
        return (n, c, ho, wo)
    if k is LayerKind.CONV2D:
        if c != a["in_channels"]:
            raise ShapeMismatch(f"{layer.name}: expects {a['in_channels']} channels, got {c}")
        kh, kw = _pair(a["kernel"])
        _expect_weight(layer, "weight", (a["out_channels"], a["in_channels"], kh, kw))
        _expect_weight(layer, "bias", (a["out_channels"],))
        ho, wo = conv_out_hw(h, w, a["kernel"], a.get("stride", 1), a.get("padding", 0))
        return (n, a["out_channels"], ho, wo)
    if k is LayerKind.DEPTHWISE_CONV2D:
        if c != a["channels"]:
            raise ShapeMismatch(f"{layer.name}: expects {a['channels']} channels, got {c}")
        m = a.get("multiplier", 1)
        kh, kw = _pair(a["kernel"])
        _expect_weight(layer, "weight", (c * m, 1, kh, kw))
        _expect_weight(layer, "bias", (c * m,))
        ho, wo = conv_out_hw(h, w, a["kernel"], a.get("stride", 1), a.get("padding", 0))
        return (n, c * m, ho, wo)
    raise InvalidGraph(f"unknown layer kind {k}")


@dataclass(frozen=True, eq=False)
class Graph:
    """Topologically ordered layer list with named tensors.

    ``ends_in_classifier`` is false only for intermediate cascade segments,
    whose terminal tensor is a feature map rather than class scores.
    """

    name: str
    input_name: str
    input_shape: Tuple[int, ...]
    layers: Tuple[LayerSpec, ...]
    output: str
    num_classes: int
    ends_in_classifier: bool = True

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "_shapes", self._validate())

    def _validate(self) -> Dict[str, tuple]:
        if self.num_classes < 1:
            raise InvalidGraph("num_classes must be positive")
        if any(d <= 0 for d in self.input_shape):
            raise ShapeMismatch(f"input shape {self.input_shape} has non-positive dims")
        shapes = {self.input_name: self.input_shape}
        names = set()
        consumed = set()
        for layer in self.layers:
            if layer.name in names:
                raise InvalidGraph(f"duplicate layer name {layer.name!r}")
            names.add(layer.name)
            for i in layer.inputs:
                if i not in shapes:
                    raise InvalidGraph(f"{layer.name}: input {i!r} is not produced by an earlier layer")
                consumed.add(i)
            if layer.output in shapes:
                raise InvalidGraph(f"tensor {layer.output!r} produced twice")
            shapes[layer.output] = infer_layer_shape(layer, [shapes[i] for i in layer.inputs])
        if self.output not in shapes:
            raise InvalidGraph(f"output {self.output!r} is never produced")
        dangling = [t for t in shapes if t not in consumed and t != self.output]
        if dangling:
            raise InvalidGraph(f"graph has more than one terminal tensor: {dangling + [self.output]}")
        if self.ends_in_classifier:
            out = shapes[self.output]
            if len(out) != 2 or out[1] != self.num_classes:
                raise ShapeMismatch(f"classifier output {out} does not match num_classes={self.num_classes}")
        return shapes

    @property
    def shapes(self) -> Dict[str, tuple]:
        return dict(self._shapes)

    def shape_of(self, tensor: str) -> tuple:
        return self._shapes[tensor]

    def layer(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def producer(self, tensor: str) -> Optional[LayerSpec]:
        for layer in self.layers:
            if layer.output == tensor:
                return layer
        return None

    def consumers(self, tensor: str) -> list:
        return [layer for layer in self.layers if tensor in layer.inputs]

    @property
    def param_count(self) -> int:
        return sum(layer.param_count for layer in self.layers)

    def replace_layers(self, layers, **changes) -> "Graph":
        return replace(self, layers=tuple(layers), **changes)

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        return (
            self.name == other.name
            and self.input_name == other.input_name
            and self.input_shape == other.input_shape
            and self.output == other.output
            and self.num_classes == other.num_classes
            and self.ends_in_classifier == other.ends_in_classifier
            and len(self.layers) == len(other.layers)
            and all(a == b for a, b in zip(self.layers, other.layers))
        )

    __hash__ = None


def weight_tensor(array, dtype=DType.F32, quant=None) -> Tensor:
    return Tensor(np.asarray(array), dtype, quant)
