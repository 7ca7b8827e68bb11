"""Hot 3D convolution kernels: numba loops and a BLAS-backed numpy path.

``SWINDIFF_BACKEND`` selects the path (``numpy`` or ``numba``). The numpy path is
the default: at the channel widths used here the 27 shifted BLAS matmuls beat
the direct loops (see ``benchmarks/bench_conv.py``). If numba cannot be
imported the numpy path is used regardless.

Both paths take the zero-padded, channels-last input ``xp`` of shape
``(B, H+k-1, W+k-1, L+k-1, Cin)`` and a weight of shape ``(k, k, k, Cin, Cout)``.
"""
from __future__ import annotations

import os

import numpy as np

_REQUESTED = os.environ.get("SWINDIFF_BACKEND", "numpy").strip().lower()
if _REQUESTED not in ("numpy", "numba"):
    raise ImportError(f"SWINDIFF_BACKEND must be 'numpy' or 'numba', got {_REQUESTED!r}")

try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:
    NUMBA_AVAILABLE = False

BACKEND = "numba" if (_REQUESTED == "numba" and NUMBA_AVAILABLE) else "numpy"


def backend() -> str:
    return BACKEND


# --------------------------------------------------------------------------
# numpy reference path
# --------------------------------------------------------------------------

def conv3d_forward_np(xp: np.ndarray, w: np.ndarray) -> np.ndarray:
    k = w.shape[0]
    B, Hp, Wp, Lp, _ = xp.shape
    H, W, L = Hp - k + 1, Wp - k + 1, Lp - k + 1
    out = np.zeros((B, H, W, L, w.shape[-1]), dtype=np.result_type(xp, w))
    for i in range(k):
        for j in range(k):
            for m in range(k):
                out += xp[:, i:i + H, j:j + W, m:m + L, :] @ w[i, j, m]
    return out


def conv3d_backward_input_np(g: np.ndarray, w: np.ndarray) -> np.ndarray:
    k = w.shape[0]
    B, H, W, L, _ = g.shape
    gxp = np.zeros((B, H + k - 1, W + k - 1, L + k - 1, w.shape[3]), dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            for m in range(k):
                gxp[:, i:i + H, j:j + W, m:m + L, :] += g @ w[i, j, m].T
    return gxp


def conv3d_backward_weight_np(xp: np.ndarray, g: np.ndarray, k: int) -> np.ndarray:
    B, H, W, L, cout = g.shape
    cin = xp.shape[-1]
    g2 = g.reshape(-1, cout)
    gw = np.empty((k, k, k, cin, cout), dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            for m in range(k):
                gw[i, j, m] = xp[:, i:i + H, j:j + W, m:m + L, :].reshape(-1, cin).T @ g2
    return gw


# --------------------------------------------------------------------------
# numba path
# --------------------------------------------------------------------------

if NUMBA_AVAILABLE:

    @njit(cache=True)
    def _conv3d_forward_nb(xp, w, out):
        k = w.shape[0]
        cin = w.shape[3]
        cout = w.shape[4]
        B, H, W, L = out.shape[0], out.shape[1], out.shape[2], out.shape[3]
        acc = np.zeros(cout, out.dtype)
        for b in range(B):
            for x in range(H):
                for y in range(W):
                    for z in range(L):
                        acc[:] = 0.0
                        for i in range(k):
                            for j in range(k):
                                for m in range(k):
                                    for ci in range(cin):
                                        v = xp[b, x + i, y + j, z + m, ci]
                                        wr = w[i, j, m, ci]
                                        for co in range(cout):
                                            acc[co] += v * wr[co]
                        out[b, x, y, z, :] = acc
        return out

    @njit(cache=True)
    def _conv3d_backward_input_nb(g, w, gxp):
        k = w.shape[0]
        cin = w.shape[3]
        cout = w.shape[4]
        B, H, W, L = g.shape[0], g.shape[1], g.shape[2], g.shape[3]
        for b in range(B):
            for x in range(H):
                for y in range(W):
                    for z in range(L):
                        for i in range(k):
                            for j in range(k):
                                for m in range(k):
                                    for ci in range(cin):
                                        acc = 0.0
                                        for co in range(cout):
                                            acc += g[b, x, y, z, co] * w[i, j, m, ci, co]
                                        gxp[b, x + i, y + j, z + m, ci] += acc
        return gxp

    @njit(cache=True)
    def _conv3d_backward_weight_nb(xp, g, gw):
        k = gw.shape[0]
        cin = gw.shape[3]
        cout = gw.shape[4]
        B, H, W, L = g.shape[0], g.shape[1], g.shape[2], g.shape[3]
        for b in range(B):
            for x in range(H):
                for y in range(W):
                    for z in range(L):
                        for i in range(k):
                            for j in range(k):
                                for m in range(k):
                                    for ci in range(cin):
                                        v = xp[b, x + i, y + j, z + m, ci]
                                        for co in range(cout):
                                            gw[i, j, m, ci, co] += v * g[b, x, y, z, co]
        return gw

    def conv3d_forward_nb(xp: np.ndarray, w: np.ndarray) -> np.ndarray:
        k = w.shape[0]
        B, Hp, Wp, Lp, _ = xp.shape
        dtype = np.result_type(xp, w)
        out = np.zeros((B, Hp - k + 1, Wp - k + 1, Lp - k + 1, w.shape[-1]), dtype=dtype)
        return _conv3d_forward_nb(np.ascontiguousarray(xp, dtype), np.ascontiguousarray(w, dtype), out)

    def conv3d_backward_input_nb(g: np.ndarray, w: np.ndarray) -> np.ndarray:
        k = w.shape[0]
        B, H, W, L, _ = g.shape
        gxp = np.zeros((B, H + k - 1, W + k - 1, L + k - 1, w.shape[3]), dtype=g.dtype)
        return _conv3d_backward_input_nb(np.ascontiguousarray(g), np.ascontiguousarray(w, g.dtype), gxp)

    def conv3d_backward_weight_nb(xp: np.ndarray, g: np.ndarray, k: int) -> np.ndarray:
        gw = np.zeros((k, k, k, xp.shape[-1], g.shape[-1]), dtype=g.dtype)
        return _conv3d_backward_weight_nb(np.ascontiguousarray(xp, g.dtype), np.ascontiguousarray(g), gw)


if BACKEND == "numba":
    conv3d_forward = conv3d_forward_nb
    conv3d_backward_input = conv3d_backward_input_nb
    conv3d_backward_weight = conv3d_backward_weight_nb
else:
    conv3d_forward = conv3d_forward_np
    conv3d_backward_input = conv3d_backward_input_np
    conv3d_backward_weight = conv3d_backward_weight_np
