"""Hot convolution / dense kernels.

Each kernel has a numba ``@njit`` implementation and a pure-numpy twin.  Both
accumulate every output element in the same fixed order (input channel, then
kernel row, then kernel column, starting from zero) so they produce
bit-identical float32 results and exact integer results.  Set
``EDGEOPT_NUMBA=0`` to force the numpy path.

The same functions serve float32 activations and int64 zero-point-shifted
integer operands; numba compiles one specialization per dtype.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

_FLAG = os.environ.get("EDGEOPT_NUMBA", "1").strip().lower()
NUMBA_ENABLED = numba is not None and _FLAG not in ("0", "false", "no", "off")


def _conv_valid_np(xp, w, sh, sw, groups, out):
    co, cg, kh, kw = w.shape
    ho, wo = out.shape[2], out.shape[3]
    opg = co // groups
    for g in range(groups):
        osl = slice(g * opg, (g + 1) * opg)
        for ci in range(cg):
            c = g * cg + ci
            for i in range(kh):
                for j in range(kw):
                    patch = xp[:, c, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw]
                    out[:, osl] += w[osl, ci, i, j][None, :, None, None] * patch[:, None]
    return out


def _dense_np(x, w, out):
    for i in range(x.shape[1]):
        out += x[:, i, None] * w[None, :, i]
    return out


if numba is not None:

    @numba.njit(cache=True, nogil=True)
    def _conv_valid_nb(xp, w, sh, sw, groups, out):  # pragma: no cover - compiled
        n_batch = xp.shape[0]
        co, cg, kh, kw = w.shape
        ho, wo = out.shape[2], out.shape[3]
        opg = co // groups
        for n in range(n_batch):
            for o in range(co):
                c0 = (o // opg) * cg
                for y in range(ho):
                    for x in range(wo):
                        acc = out[n, o, y, x]
                        for ci in range(cg):
                            for i in range(kh):
                                for j in range(kw):
                                    acc += xp[n, c0 + ci, y * sh + i, x * sw + j] * w[o, ci, i, j]
                        out[n, o, y, x] = acc
        return out

    @numba.njit(cache=True, nogil=True)
    def _dense_nb(x, w, out):  # pragma: no cover - compiled
        n_batch, n_in = x.shape
        n_out = w.shape[0]
        for n in range(n_batch):
            for o in range(n_out):
                acc = out[n, o]
                for i in range(n_in):
                    acc += x[n, i] * w[o, i]
                out[n, o] = acc
        return out

else:  # pragma: no cover
    _conv_valid_nb = None
    _dense_nb = None


def _impl(use_numba):
    if use_numba is None:
        use_numba = NUMBA_ENABLED
    if use_numba and _conv_valid_nb is None:
        raise RuntimeError("numba is not available")
    return (_conv_valid_nb, _dense_nb) if use_numba else (_conv_valid_np, _dense_np)


def conv2d(x, w, stride=(1, 1), padding=(0, 0), groups=1, use_numba=None):
    """Grouped 2-D cross-correlation without bias.

    ``x`` is (N, C, H, W) and ``w`` is (Cout, C/groups, Kh, Kw); both must
    share a dtype (float32, or int64 for integer kernels).  Padding inserts
    zeros, which for integer kernels must already mean "real zero", i.e. the
    operands are zero-point shifted before the call.
    """
    conv, _ = _impl(use_numba)
    sh, sw = stride
    ph, pw = padding
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w, dtype=x.dtype)
    n, _, h, wd = x.shape
    co, _, kh, kw = w.shape
    ho = (h - kh) // sh + 1
    wo = (wd - kw) // sw + 1
    out = np.zeros((n, co, ho, wo), dtype=x.dtype)
    return conv(x, w, sh, sw, groups, out)


def dense(x, w, use_numba=None):
    """``x @ w.T`` accumulated sequentially over the input features."""
    _, fc = _impl(use_numba)
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w, dtype=x.dtype)
    out = np.zeros((x.shape[0], w.shape[0]), dtype=x.dtype)
    return fc(x, w, out)


def warmup():
    """Trigger JIT compilation of every specialization used at run time."""
    if not NUMBA_ENABLED:
        return
    for dt in (np.float32, np.int64):
        conv2d(np.ones((1, 1, 2, 2), dt), np.ones((1, 1, 1, 1), dt))
        dense(np.ones((1, 2), dt), np.ones((1, 2), dt))
