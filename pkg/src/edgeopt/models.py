"""Graph construction helpers and small reference backbones.

Backbone convolution weights are random (He-uniform, seeded); only the final
classifier is ever fitted (see :func:`edgeopt.exits.fit_classifier`).
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .graph import Graph, LayerKind, LayerSpec, infer_layer_shape
from .tensor import Tensor


class GraphBuilder:
    """Append-only builder that tracks the current tensor and its shape."""

    def __init__(self, name, input_shape, num_classes, seed=0, input_name="input",
                 rng: Optional[np.random.Generator] = None):
        self.name = name
        self.input_name = input_name
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.rng = rng if rng is not None else np.random.default_rng(seed)
        self.layers = []
        self.shapes = {input_name: self.input_shape}
        self.cur = input_name
        self._counter = {}

    def _name(self, prefix):
        n = self._counter.get(prefix, 0)
        self._counter[prefix] = n + 1
        return f"{prefix}{n}"

    def add_layer(self, kind, attrs=None, weights=None, inputs=None, name=None, output=None):
        kind = LayerKind(kind)
        name = name or self._name(kind.value.lower())
        inputs = tuple(inputs) if inputs is not None else (self.cur,)
        layer = LayerSpec(name, kind, inputs, output or name, attrs or {}, weights or {})
        self.shapes[layer.output] = infer_layer_shape(layer, [self.shapes[i] for i in inputs])
        self.layers.append(layer)
        self.cur = layer.output
        return layer.output

    def _uniform(self, bound, shape):
        return Tensor(self.rng.uniform(-bound, bound, size=shape).astype(np.float32))

    def conv(self, cout, kernel=3, stride=1, padding=None, bias=True, src=None, name=None, init="he", scale=1.0):
        src = src or self.cur
        cin = self.shapes[src][1]
        padding = kernel // 2 if padding is None else padding
        fan_in = cin * kernel * kernel
        bound = (math.sqrt(6.0 / fan_in) if init == "he" else 1.0 / math.sqrt(fan_in)) * scale
        w = {"weight": self._uniform(bound, (cout, cin, kernel, kernel))}
        if bias:
            w["bias"] = Tensor(np.zeros(cout, np.float32)) if init == "he" else self._uniform(bound, (cout,))
        attrs = dict(in_channels=cin, out_channels=cout, kernel=kernel, stride=stride, padding=padding)
        return self.add_layer(LayerKind.CONV2D, attrs, w, inputs=(src,), name=name)

    def depthwise(self, kernel=3, stride=1, padding=None, multiplier=1, bias=True, name=None):
        c = self.shapes[self.cur][1]
        padding = kernel // 2 if padding is None else padding
        bound = math.sqrt(6.0 / (kernel * kernel))
        w = {"weight": self._uniform(bound, (c * multiplier, 1, kernel, kernel))}
        if bias:
            w["bias"] = Tensor(np.zeros(c * multiplier, np.float32))
        attrs = dict(channels=c, multiplier=multiplier, kernel=kernel, stride=stride, padding=padding)
        return self.add_layer(LayerKind.DEPTHWISE_CONV2D, attrs, w, name=name)

    def fc(self, out_features, bias=True, name=None, init="uniform"):
        fin = self.shapes[self.cur][1]
        bound = 1.0 / math.sqrt(fin) if init == "uniform" else math.sqrt(6.0 / fin)
        w = {"weight": self._uniform(bound, (out_features, fin))}
        if bias:
            w["bias"] = self._uniform(bound, (out_features,))
        return self.add_layer(LayerKind.FULLY_CONNECTED, dict(in_features=fin, out_features=out_features), w,
                              name=name)

    def bn(self, name=None):
        c = self.shapes[self.cur][1]
        w = {
            "scale": Tensor(self.rng.uniform(0.8, 1.2, c).astype(np.float32)),
            "shift": Tensor(self.rng.uniform(-0.1, 0.1, c).astype(np.float32)),
        }
        return self.add_layer(LayerKind.BATCHNORM_FOLDED, dict(channels=c), w, name=name)

    def relu(self, name=None):
        return self.add_layer(LayerKind.RELU, name=name)

    def relu6(self, name=None):
        return self.add_layer(LayerKind.RELU6, name=name)

    def maxpool(self, kernel=2, stride=None, padding=0, name=None):
        return self.add_layer(LayerKind.MAXPOOL, dict(kernel=kernel, stride=stride or kernel, padding=padding),
                              name=name)

    def avgpool(self, kernel=2, stride=None, name=None):
        return self.add_layer(LayerKind.AVGPOOL, dict(kernel=kernel, stride=stride or kernel), name=name)

    def gap(self, name=None):
        return self.add_layer(LayerKind.GLOBAL_AVGPOOL, name=name)

    def flatten(self, name=None):
        return self.add_layer(LayerKind.FLATTEN, name=name)

    def add(self, a, b, name=None):
        return self.add_layer(LayerKind.ADD, inputs=(a, b), name=name)

    def softmax(self, name=None):
        return self.add_layer(LayerKind.SOFTMAX, name=name)

    def build(self, ends_in_classifier=True) -> Graph:
        return Graph(self.name, self.input_name, self.input_shape, tuple(self.layers), self.cur,
                     self.num_classes, ends_in_classifier)


def chain_net(input_shape=(1, 1, 16, 16), num_classes=4, widths=(8, 16), seed=0, name="chain") -> Graph:
    """conv-relu-maxpool stages followed by Flatten and a dense classifier.

    Stage ``i`` ends in the tensor ``stage{i}``.
    """
    b = GraphBuilder(name, input_shape, num_classes, seed)
    for i, w in enumerate(widths):
        b.conv(w)
        b.relu()
        b.maxpool(2, name=f"stage{i}")
    b.flatten()
    b.fc(num_classes, name="classifier")
    return b.build()


def residual_net(input_shape=(1, 3, 16, 16), num_classes=4, width=8, blocks=2, stages=2, seed=0,
                 name="resnet_toy", branch_scale=0.1) -> Graph:
    """Stem plus ``stages`` groups of basic residual blocks.

    Block outputs are named ``block{s}_{j}``; every block output is a valid
    exit attach point.  Stages after the first downsample with a 2x2 average
    pool and widen with a 1x1 conv.  The classifier sees the flattened,
    2x2-pooled last feature map, so it keeps spatial layout that a global
    pooling head cannot see.  The second conv of every residual branch is
    scaled by ``branch_scale`` so an untrained stack stays close to identity.
    """
    b = GraphBuilder(name, input_shape, num_classes, seed)
    b.conv(width, name="stem")
    b.relu(name="stem_relu")
    c = width
    for s in range(stages):
        if s > 0:
            c *= 2
            b.avgpool(2, name=f"down{s}_pool")
            b.conv(c, kernel=1, name=f"down{s}")
            b.relu(name=f"down{s}_relu")
        for j in range(blocks):
            skip = b.cur
            b.conv(c, name=f"b{s}_{j}_conv1")
            b.relu()
            b.conv(c, name=f"b{s}_{j}_conv2", scale=branch_scale)
            b.add(skip, b.cur, name=f"b{s}_{j}_add")
            b.relu(name=f"block{s}_{j}")
    b.avgpool(2, name="head_pool")
    b.flatten(name="flat")
    b.fc(num_classes, name="classifier")
    return b.build()


def mobile_net(input_shape=(1, 3, 16, 16), num_classes=4, widths=(8, 16, 32), seed=0,
               name="mobile_toy") -> Graph:
    """Depthwise-separable stages (DW 3x3, ReLU6, pointwise conv, ReLU6)."""
    b = GraphBuilder(name, input_shape, num_classes, seed)
    b.conv(widths[0], stride=1, name="stem")
    b.relu6()
    for i, w in enumerate(widths[1:]):
        b.depthwise(stride=2)
        b.relu6()
        b.conv(w, kernel=1)
        b.relu6(name=f"stage{i}")
    b.gap()
    b.flatten()
    b.fc(num_classes, name="classifier")
    return b.build()


ARCHITECTURES = {"chain": chain_net, "residual": residual_net, "mobile": mobile_net}
