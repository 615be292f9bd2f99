import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgeopt.engine import count_macs, execute, forward, forward_array, layer_macs, softmax
from edgeopt.errors import EmptyInput, InvalidGraph, MissingWeight, NonFiniteInput, ShapeMismatch
from edgeopt.graph import Graph, LayerKind, LayerSpec
from edgeopt.models import GraphBuilder, chain_net, mobile_net, residual_net
from edgeopt.tensor import DType, QuantParams, Tensor, f32

from oracles import conv2d_loops, dense_loops, softmax_mp


def one_layer(kind, in_shape, attrs=None, weights=None, num_classes=None, classifier=False):
    layer = LayerSpec("l", kind, ("x",), "y", attrs or {}, weights or {})
    return Graph("g", "x", in_shape, (layer,), "y", num_classes or 1, ends_in_classifier=classifier)


# --------------------------------------------------------------------------- tensors

def test_tensor_shape_and_quant_rules():
    t = f32([1, 2, 3, 4], shape=(1, 1, 2, 2))
    assert t.shape == (1, 1, 2, 2) and t.size == 4
    with pytest.raises(ShapeMismatch):
        f32([1, 2, 3], shape=(2, 2))
    with pytest.raises(ValueError):
        Tensor([1, 2], DType.U8)
    with pytest.raises(ValueError):
        Tensor([1.0], DType.F32, QuantParams(1.0, 0))
    q = Tensor([0, 255], DType.U8, QuantParams(0.5, 10))
    assert q.dequantize().tolist() == [-5.0, 122.5]
    assert not t.data.flags.writeable


# --------------------------------------------------------------------------- forward examples

def test_flatten_identity():
    g = one_layer(LayerKind.FLATTEN, (1, 1, 2, 2), num_classes=4, classifier=True)
    out = forward(g, f32([1, 2, 3, 4], shape=(1, 1, 2, 2)))
    assert out.data.tolist() == [[1, 2, 3, 4]]


def test_fc_identity_weight():
    w = {"weight": f32(np.eye(3)), "bias": f32(np.zeros(3))}
    g = one_layer(LayerKind.FULLY_CONNECTED, (1, 3), dict(in_features=3, out_features=3), w, 3, True)
    assert forward(g, f32([[5, -1, 2]])).data.tolist() == [[5, -1, 2]]


def test_1x1_conv_sums_channels(rng):
    w = {"weight": f32(np.ones((1, 2, 1, 1)))}
    g = one_layer(LayerKind.CONV2D, (1, 2, 2, 2), dict(in_channels=2, out_channels=1, kernel=1, stride=1,
                                                       padding=0), w)
    x = rng.standard_normal((1, 2, 2, 2)).astype(np.float32)
    out = forward_array(g, x)
    np.testing.assert_allclose(out, conv2d_loops(x, np.ones((1, 2, 1, 1))), rtol=1e-6)
    np.testing.assert_array_equal(out[0, 0], x[0, 0] + x[0, 1])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(3, 7), st.sampled_from([1, 3]),
       st.integers(1, 2), st.integers(0, 1), st.integers(0, 2**31 - 1))
def test_conv_matches_loop_oracle(n, cin, cout, hw, k, stride, pad, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((n, cin, hw, hw)).astype(np.float32)
    w = r.standard_normal((cout, cin, k, k)).astype(np.float32)
    b = r.standard_normal(cout).astype(np.float32)
    g = one_layer(LayerKind.CONV2D, (1, cin, hw, hw),
                  dict(in_channels=cin, out_channels=cout, kernel=k, stride=stride, padding=pad),
                  {"weight": f32(w), "bias": f32(b)})
    ref = conv2d_loops(x, w, b, stride, pad)
    np.testing.assert_allclose(forward_array(g, x), ref, rtol=1e-5, atol=1e-5)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 3), st.integers(3, 6), st.integers(1, 2), st.integers(0, 2**31 - 1))
def test_depthwise_matches_loop_oracle(c, mult, hw, stride, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((1, c, hw, hw)).astype(np.float32)
    w = r.standard_normal((c * mult, 1, 3, 3)).astype(np.float32)
    g = one_layer(LayerKind.DEPTHWISE_CONV2D, (1, c, hw, hw),
                  dict(channels=c, multiplier=mult, kernel=3, stride=stride, padding=1), {"weight": f32(w)})
    ref = conv2d_loops(x, w, None, stride, 1, groups=c)
    np.testing.assert_allclose(forward_array(g, x), ref, rtol=1e-5, atol=1e-5)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 12), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_fc_matches_loop_oracle(n, fin, fout, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((n, fin)).astype(np.float32)
    w = r.standard_normal((fout, fin)).astype(np.float32)
    b = r.standard_normal(fout).astype(np.float32)
    g = one_layer(LayerKind.FULLY_CONNECTED, (1, fin), dict(in_features=fin, out_features=fout),
                  {"weight": f32(w), "bias": f32(b)}, fout, True)
    np.testing.assert_allclose(forward_array(g, x), dense_loops(x, w, b), rtol=1e-5, atol=1e-5)


def test_pooling_and_elementwise_kinds():
    x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4) - 6
    mp = one_layer(LayerKind.MAXPOOL, (1, 1, 4, 4), dict(kernel=2, stride=2, padding=0))
    assert forward_array(mp, x)[0, 0].tolist() == [[-1, 1], [7, 9]]
    ap = one_layer(LayerKind.AVGPOOL, (1, 1, 4, 4), dict(kernel=2, stride=2))
    assert forward_array(ap, x)[0, 0].tolist() == [[-3.5, -1.5], [4.5, 6.5]]
    gap = one_layer(LayerKind.GLOBAL_AVGPOOL, (1, 1, 4, 4))
    assert forward_array(gap, x).reshape(-1).tolist() == [1.5]
    relu = one_layer(LayerKind.RELU, (1, 1, 4, 4))
    assert forward_array(relu, x).min() == 0
    relu6 = one_layer(LayerKind.RELU6, (1, 1, 4, 4))
    assert forward_array(relu6, x).max() == 6
    bn = one_layer(LayerKind.BATCHNORM_FOLDED, (1, 1, 4, 4), dict(channels=1),
                   {"scale": f32([2.0]), "shift": f32([1.0])})
    np.testing.assert_array_equal(forward_array(bn, x), 2 * x + 1)


def test_add_requires_equal_shapes():
    a = LayerSpec("a", LayerKind.MAXPOOL, ("x",), "a", dict(kernel=2, stride=2, padding=0))
    add = LayerSpec("add", LayerKind.ADD, ("x", "a"), "y")
    with pytest.raises(ShapeMismatch):
        Graph("g", "x", (1, 1, 4, 4), (a, add), "y", 1, ends_in_classifier=False)


def test_graph_validation_errors():
    relu = LayerSpec("r", LayerKind.RELU, ("nope",), "y")
    with pytest.raises(InvalidGraph):
        Graph("g", "x", (1, 3), (relu,), "y", 3)
    a = LayerSpec("a", LayerKind.RELU, ("x",), "a")
    b = LayerSpec("b", LayerKind.RELU, ("x",), "b")
    with pytest.raises(InvalidGraph):
        Graph("g", "x", (1, 3), (a, b), "b", 3)
    with pytest.raises(ShapeMismatch):
        Graph("g", "x", (1, 3), (a,), "a", 4)
    no_w = one_layer(LayerKind.FULLY_CONNECTED, (1, 3), dict(in_features=3, out_features=2), {}, 2, True)
    with pytest.raises(MissingWeight):
        forward(no_w, np.zeros((1, 3), np.float32))
    with pytest.raises(ShapeMismatch):
        one_layer(LayerKind.CONV2D, (1, 2, 4, 4), dict(in_channels=2, out_channels=3, kernel=3, stride=1,
                                                       padding=0), {"weight": f32(np.ones((3, 1, 3, 3)))})


def test_forward_input_shape_mismatch():
    g = chain_net()
    with pytest.raises(ShapeMismatch):
        forward(g, np.zeros((1, 1, 8, 8), np.float32))


def test_batch_dimension_is_free():
    g = residual_net()
    x = np.random.default_rng(0).standard_normal((3,) + g.input_shape[1:]).astype(np.float32)
    full = forward_array(g, x)
    rows = np.concatenate([forward_array(g, x[i:i + 1]) for i in range(3)])
    np.testing.assert_array_equal(full, rows)


def test_forward_is_deterministic_and_threadsafe():
    g = mobile_net()
    x = np.random.default_rng(1).standard_normal(g.input_shape).astype(np.float32)
    ref = forward_array(g, x)
    outs = [None] * 8

    def work(i):
        outs[i] = forward_array(g, x)

    threads = [threading.Thread(target=work, args=(i,)) for i in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert all(np.array_equal(o, ref) for o in outs)


def test_execute_keeps_intermediates():
    g = chain_net()
    env = execute(g, np.zeros(g.input_shape, np.float32), keep_all=True)
    assert {"stage0", "stage1", g.output} <= set(env)


# --------------------------------------------------------------------------- softmax

def test_softmax_examples():
    np.testing.assert_allclose(softmax([0, 0, 0]), [1 / 3] * 3, rtol=0, atol=1e-15)
    p = softmax([1000, 0])
    assert p[0] == 1.0 and 0 <= p[1] < 1e-300 and np.all(np.isfinite(p))
    np.testing.assert_allclose(softmax([1, 2, 3]), [0.09003, 0.24473, 0.66524], atol=5e-6)
    np.testing.assert_allclose(softmax([1, 2, 3]), softmax_mp([1, 2, 3]), rtol=1e-12)


def test_softmax_errors():
    with pytest.raises(EmptyInput):
        softmax([])
    with pytest.raises(NonFiniteInput):
        softmax([0.0, np.nan])
    with pytest.raises(NonFiniteInput):
        softmax([0.0, np.inf])


@settings(max_examples=1000, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=20))
def test_softmax_is_distribution(logits):
    p = softmax(logits)
    assert np.all(p >= 0) and abs(p.sum() - 1) <= 1e-6


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=10))
def test_softmax_stable_for_large_logits(logits):
    p = softmax(logits)
    assert np.all(np.isfinite(p)) and abs(p.sum() - 1) <= 1e-6


# --------------------------------------------------------------------------- MACs

def test_mac_examples():
    fc = LayerSpec("fc", LayerKind.FULLY_CONNECTED, ("x",), "y", dict(in_features=10, out_features=100),
                   {"weight": f32(np.zeros((100, 10)))})
    assert layer_macs(fc, (1, 10), (1, 100)) == 1000
    conv = LayerSpec("c", LayerKind.CONV2D, ("x",), "y",
                     dict(in_channels=3, out_channels=8, kernel=3, stride=1, padding=0),
                     {"weight": f32(np.zeros((8, 3, 3, 3)))})
    assert layer_macs(conv, (1, 3, 6, 6), (1, 8, 4, 4)) == 3456


def test_count_macs_sums_layers():
    b = GraphBuilder("toy", (1, 3, 6, 6), 5)
    b.conv(8, kernel=3, padding=0)
    b.relu()
    b.depthwise(kernel=3, padding=1)
    b.gap()
    b.flatten()
    b.fc(5)
    g = b.build()
    rep = count_macs(g)
    # conv 8*3*9*16, depthwise 8*1*9*16, fc 8*5, zero elsewhere
    assert rep.macs_per_layer["conv2d0"] == 3456
    assert rep.macs_per_layer["depthwiseconv2d0"] == 1152
    assert rep.macs_per_layer["fullyconnected0"] == 40
    assert rep.total_macs == sum(rep.macs_per_layer.values()) == 3456 + 1152 + 40
    assert all(v == 0 for k, v in rep.macs_per_layer.items() if k.startswith(("relu", "global", "flatten")))
    assert rep.param_count == g.param_count
