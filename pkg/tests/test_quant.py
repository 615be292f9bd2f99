from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgeopt import qmath
from edgeopt.engine import execute, forward_array
from edgeopt.errors import EmptyCalibrationSet, NonFiniteRange, PlanCoverageError
from edgeopt.graph import Graph, LayerKind, LayerSpec
from edgeopt.models import GraphBuilder, chain_net, mobile_net, residual_net
from edgeopt.quant import (PRESETS, QUANTIZABLE_KINDS, QuantPlan, apply_dq, apply_ptq, calibrate,
                           covered_weight_bytes, dequantize_tensor, dq_plan, quantize_tensor, resolve_kinds)
from edgeopt.tensor import DType, QuantParams, f32


def test_qparams_examples():
    assert qmath.compute_qparams(0, 255) == QuantParams(1.0, 0)
    qp = qmath.compute_qparams(-1, 1)
    assert qp.zero_point == 128 and abs(qp.scale - 2 / 255) < 1e-15
    assert qmath.compute_qparams(0, 0) == QuantParams(1.0, 0)
    # ranges not containing zero are widened to include it
    assert qmath.compute_qparams(2, 4) == qmath.compute_qparams(0, 4)
    with pytest.raises(NonFiniteRange):
        qmath.compute_qparams(0, float("inf"))
    with pytest.raises(NonFiniteRange):
        qmath.compute_qparams(float("nan"), 1)


def test_quantize_examples():
    qp = QuantParams(0.1, 0)
    t = quantize_tensor(f32([1.23, 0.0, 1e6]), qp)
    assert t.dtype is DType.U8 and t.data.tolist() == [12, 0, 255]
    back = dequantize_tensor(t).data
    assert abs(back[0] - 1.2) < 1e-6 and back[1] == 0.0
    for lo, hi in [(-3.7, 0.2), (-1, 1), (0, 9), (-5, -1)]:
        qp = qmath.compute_qparams(lo, hi)
        assert qmath.dequantize_array(qmath.quantize_array(0.0, qp), qp) == 0.0


def test_half_up_rounding():
    assert qmath.round_half_up(2.5) == 3 and qmath.round_half_up(-2.5) == -2
    assert qmath.round_half_up(np.array([0.5, 1.5, -0.5])).tolist() == [1, 2, 0]


@settings(max_examples=500, deadline=None)
@given(st.floats(-1e3, 1e3), st.floats(0, 1e3), st.floats(0, 1))
def test_roundtrip_bound(lo, width, u):
    hi = lo + width
    qp = qmath.compute_qparams(lo, hi)
    lo2, hi2 = min(lo, 0.0), max(hi, 0.0)
    x = lo2 + u * (hi2 - lo2)
    err = abs(float(qmath.dequantize_array(qmath.quantize_array(x, qp), qp, np.float64)) - x)
    assert err <= qp.scale / 2 * (1 + 1e-9)
    assert qmath.dequantize_array(qmath.quantize_array(0.0, qp), qp, np.float64) == 0.0


@settings(max_examples=300, deadline=None)
@given(st.floats(-100, 0), st.floats(0, 100))
def test_qparams_match_rational_oracle(lo, hi):
    qp = qmath.compute_qparams(lo, hi)
    if lo == hi == 0:
        return
    scale = (Fraction(hi) - Fraction(lo)) / 255
    assert float(scale) == pytest.approx(qp.scale, rel=1e-15)
    z = -Fraction(lo) / Fraction(qp.scale)
    expected = min(max(int(z + Fraction(1, 2)) if z >= 0 else 0, 0), 255)
    assert qp.zero_point == expected


def test_resolve_kinds():
    assert resolve_kinds("efficientnet-style") == {LayerKind.CONV2D, LayerKind.DEPTHWISE_CONV2D}
    assert resolve_kinds("shufflenet-style") == {LayerKind.CONV2D, LayerKind.DEPTHWISE_CONV2D,
                                                 LayerKind.FULLY_CONNECTED}
    assert resolve_kinds("full-graph") == QUANTIZABLE_KINDS == PRESETS["full-graph"]
    assert resolve_kinds("Conv2D,ReLU") == {LayerKind.CONV2D, LayerKind.RELU}
    assert resolve_kinds([]) == frozenset()
    with pytest.raises(ValueError):
        resolve_kinds("Softmax")


def test_calibration_records_extremes(rng):
    g = residual_net()
    a, b = (rng.standard_normal(g.input_shape).astype(np.float32) for _ in range(2))
    p1 = calibrate(g, [a])
    env = execute(g, a, keep_all=True)
    for name, (lo, hi) in p1.calibration_summary.items():
        assert lo == env[name].min() and hi == env[name].max()
    p2 = calibrate(g, [a, b])
    env_b = execute(g, b, keep_all=True)
    for name, (lo, hi) in p2.calibration_summary.items():
        assert lo == min(env[name].min(), env_b[name].min())
        assert hi == max(env[name].max(), env_b[name].max())


def test_calibration_errors_and_degenerate():
    g = residual_net()
    with pytest.raises(EmptyCalibrationSet):
        calibrate(g, [])
    p = calibrate(g, [np.zeros(g.input_shape, np.float32)])
    assert p.calibration_summary["input"] == (0.0, 0.0)
    q = apply_ptq(g, p)
    assert q.layers[0].quant.inputs[0] == QuantParams(1.0, 0)


def test_empty_selection_is_identity(rng):
    g = residual_net()
    plan = calibrate(g, [rng.standard_normal(g.input_shape).astype(np.float32)], [])
    assert apply_ptq(g, plan) == g
    assert apply_dq(g, []) == g


def test_plan_coverage_error(rng):
    g = residual_net()
    plan = calibrate(g, [rng.standard_normal(g.input_shape).astype(np.float32)])
    del plan.calibration_summary["stem_relu"]
    with pytest.raises(PlanCoverageError):
        apply_ptq(g, plan)


def test_plan_json_roundtrip(tmp_path, rng):
    g = residual_net()
    plan = calibrate(g, [rng.standard_normal(g.input_shape).astype(np.float32)], "shufflenet-style")
    plan.save(tmp_path / "p.json")
    back = QuantPlan.load(tmp_path / "p.json")
    assert back.to_dict() == plan.to_dict()
    assert apply_ptq(g, back) == apply_ptq(g, plan)
    dq = dq_plan(g, "full-graph")
    assert dq.mode == "DQ" and not dq.calibration_summary
    with pytest.raises(ValueError):
        QuantPlan("DQ", [], {"x": (0.0, 1.0)})


def lattice_fc():
    w = np.array([[255, 0, 3], [0, 1, 2]], np.float32) / 256
    b = np.array([0, 3], np.float32) / 256
    layer = LayerSpec("fc", LayerKind.FULLY_CONNECTED, ("x",), "fc", dict(in_features=3, out_features=2),
                      {"weight": f32(w), "bias": f32(b)})
    return Graph("lattice", "x", (1, 3), (layer,), "fc", 2)


def test_lattice_fc_is_exact():
    g = lattice_fc()
    plan = QuantPlan("PTQ", {LayerKind.FULLY_CONNECTED}, {"x": (0.0, 255.0), "fc": (0.0, 255.0 / 256)})
    q = apply_ptq(g, plan)
    assert q.layers[0].weights["weight"].quant == QuantParams(1 / 256, 0)
    for x in ([[1, 7, 0]], [[0, 0, 0]], [[0, 50, 60]], [[0, 200, 0]]):
        x = np.array(x, np.float32)
        assert forward_array(q, x).tobytes() == forward_array(g, x).tobytes()


def test_dq_constant_input_uses_degenerate_rule():
    g = lattice_fc()
    q = apply_dq(g)
    out = forward_array(q, np.zeros((1, 3), np.float32))
    np.testing.assert_allclose(out, [g.layers[0].weights["bias"].data], atol=1 / 512)


def test_dq_vs_ptq_bound(rng):
    b = GraphBuilder("fc2", (1, 16), 4, seed=2)
    b.fc(12)
    b.relu()
    b.fc(4)
    g = b.build()
    calib = [rng.standard_normal((1, 16)).astype(np.float32) for _ in range(32)]
    plan = calibrate(g, calib, "shufflenet-style")
    ptq, dq = apply_ptq(g, plan), apply_dq(g, "shufflenet-style")
    x = calib[0]
    ref = forward_array(g, x)
    steps = 0.0
    for layer in ptq.layers:
        if layer.quant is not None:
            w = layer.weights["weight"]
            fan = w.shape[1]
            s_in = layer.quant.inputs[0].scale
            x_max = max(abs(v) for v in plan.calibration_summary[layer.inputs[0]])
            w_max = float(np.abs(w.dequantize()).max())
            steps += fan * (s_in / 2 * w_max + w.quant.scale / 2 * x_max + s_in * w.quant.scale / 4)
            steps += layer.quant.output.scale / 2
    steps *= max(1.0, float(np.abs(g.layers[-1].weights["weight"].data).sum(axis=1).max()))
    diff = np.abs(forward_array(ptq, x) - forward_array(dq, x)).max()
    assert diff <= 2 * steps
    assert np.abs(forward_array(dq, x) - ref).max() <= steps


def test_covered_bytes_shrink(rng):
    # weight-dominated graph: biases stay i32, so depthwise-heavy toys sit lower
    for g in (residual_net(), chain_net()):
        plan = calibrate(g, [rng.standard_normal(g.input_shape).astype(np.float32)])
        q = apply_ptq(g, plan)
        names = [layer.name for layer in q.layers if layer.quant is not None and layer.weights]
        before, after = covered_weight_bytes(g, names), covered_weight_bytes(q, names)
        assert sum(layer.param_count for layer in g.layers if layer.name in names) >= 1000
        assert 3.5 <= before / after <= 4.0


def test_dq_only_touches_weighted_layers():
    g = residual_net()
    q = apply_dq(g, "full-graph")
    for a, b in zip(g.layers, q.layers):
        if a.kind in (LayerKind.CONV2D, LayerKind.FULLY_CONNECTED):
            assert b.quant.mode == "dq" and b.weights["weight"].dtype is DType.U8
        else:
            assert b == a


def test_ptq_accuracy_close_to_float(rng):
    g = residual_net()
    xs = rng.standard_normal((16,) + g.input_shape[1:]).astype(np.float32)
    q = apply_ptq(g, calibrate(g, [xs[i:i + 1] for i in range(16)]))
    a, b = forward_array(g, xs), forward_array(q, xs)
    assert np.abs(a - b).max() < 0.1 * np.abs(a).max()


def test_weight_tensors_shrink_fourfold(rng):
    g = mobile_net()
    q = apply_ptq(g, calibrate(g, [rng.standard_normal(g.input_shape).astype(np.float32)]))
    for a, b in zip(g.layers, q.layers):
        if b.quant is not None and "weight" in b.weights:
            assert a.weights["weight"].nbytes == 4 * b.weights["weight"].nbytes
