"""Compare the numba and pure-numpy kernel paths.

    python benchmarks/bench_kernels.py [--repeat 5] [--json]

Times conv2d / dense on a few representative shapes, plus one batch-1 forward
pass of the reference residual backbone, and checks that both paths agree
bit for bit.
"""

import argparse
import json
import time

import numpy as np

from edgeopt import _kernels
from edgeopt.engine import forward_array
from edgeopt.models import residual_net

CASES = [
    ("conv 3x3 16->16 @16x16", "conv", (1, 16, 16, 16), (16, 16, 3, 3), 1),
    ("conv 3x3 32->32 @8x8", "conv", (1, 32, 8, 8), (32, 32, 3, 3), 1),
    ("depthwise 3x3 32 @16x16", "conv", (1, 32, 16, 16), (32, 1, 3, 3), 32),
    ("dense 512->10 batch 1", "dense", (1, 512), (10, 512), None),
    ("dense 256->256 batch 64", "dense", (64, 256), (256, 256), None),
]


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def run(repeat):
    _kernels.warmup()
    rng = np.random.default_rng(0)
    rows = []
    for name, kind, xs, ws, groups in CASES:
        x = rng.standard_normal(xs).astype(np.float32)
        w = rng.standard_normal(ws).astype(np.float32)
        if kind == "conv":
            def call(nb):
                return _kernels.conv2d(x, w, (1, 1), (1, 1), groups, use_numba=nb)
        else:
            def call(nb):
                return _kernels.dense(x, w, use_numba=nb)
        t_nb, a = best_of(lambda: call(True), repeat)
        t_np, b = best_of(lambda: call(False), repeat)
        rows.append({"case": name, "numba_ms": 1e3 * t_nb, "numpy_ms": 1e3 * t_np,
                     "ratio": t_np / t_nb, "bit_equal": bool(np.array_equal(a, b))})

    g = residual_net()
    x = rng.standard_normal(g.input_shape).astype(np.float32)
    t_nb, a = best_of(lambda: forward_array(g, x, use_numba=True), repeat)
    t_np, b = best_of(lambda: forward_array(g, x, use_numba=False), repeat)
    rows.append({"case": "residual_net forward batch 1", "numba_ms": 1e3 * t_nb, "numpy_ms": 1e3 * t_np,
                 "ratio": t_np / t_nb, "bit_equal": bool(np.array_equal(a, b))})
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", action="store_true")
    args = ap.parse_args()
    rows = run(args.repeat)
    if args.json:
        print(json.dumps(rows, indent=2))
        return
    print(f"{'case':32s} {'numba ms':>10s} {'numpy ms':>10s} {'numpy/numba':>12s}  equal")
    for r in rows:
        print(f"{r['case']:32s} {r['numba_ms']:10.3f} {r['numpy_ms']:10.3f} {r['ratio']:12.2f}  {r['bit_equal']}")


if __name__ == "__main__":
    main()
