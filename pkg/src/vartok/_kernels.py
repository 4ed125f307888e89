"""Fused elementwise/rowwise kernels.

Single-pass numba versions of the hottest ops (softmax and gelu, forward and
backward).  Serial on purpose: results must be bit-deterministic run to run.
Falls back to plain numpy when numba is unavailable; both paths compute the
same values to within the usual summation-order caveat, and each build uses
one path consistently.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - CI image ships numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def deco(f):
            return f

        if args and callable(args[0]):
            return args[0]
        return deco


_GELU_C = 0.7978845608028654


@njit(cache=True)
def _softmax_fwd_2d(x, out):
    rows, n = x.shape
    for r in range(rows):
        m = x[r, 0]
        for j in range(1, n):
            if x[r, j] > m:
                m = x[r, j]
        s = 0.0
        for j in range(n):
            e = np.exp(x[r, j] - m)
            out[r, j] = e
            s += e
        inv = 1.0 / s
        for j in range(n):
            out[r, j] *= inv


@njit(cache=True)
def _softmax_bwd_2d(y, g, out):
    rows, n = y.shape
    for r in range(rows):
        s = 0.0
        for j in range(n):
            s += g[r, j] * y[r, j]
        for j in range(n):
            out[r, j] = y[r, j] * (g[r, j] - s)


@njit(cache=True)
def _gelu_fwd_1d(x, out):
    for i in range(x.size):
        v = x[i]
        t = np.tanh(_GELU_C * (v + 0.044715 * v * v * v))
        out[i] = 0.5 * v * (1.0 + t)


@njit(cache=True)
def _gelu_bwd_1d(x, g, out):
    for i in range(x.size):
        v = x[i]
        t = np.tanh(_GELU_C * (v + 0.044715 * v * v * v))
        d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * _GELU_C * (1.0 + 0.134145 * v * v)
        out[i] = g[i] * d


def softmax_fwd(x: np.ndarray) -> np.ndarray:
    """Row softmax over the last axis."""
    if HAVE_NUMBA and x.flags.c_contiguous:
        out = np.empty_like(x)
        _softmax_fwd_2d(x.reshape(-1, x.shape[-1]), out.reshape(-1, x.shape[-1]))
        return out
    e = x - x.max(axis=-1, keepdims=True)
    np.exp(e, out=e)
    e /= e.sum(axis=-1, keepdims=True)
    return e


def softmax_bwd(y: np.ndarray, g: np.ndarray) -> np.ndarray:
    if HAVE_NUMBA and y.flags.c_contiguous and g.flags.c_contiguous:
        out = np.empty_like(y)
        _softmax_bwd_2d(y.reshape(-1, y.shape[-1]), g.reshape(-1, g.shape[-1]),
                        out.reshape(-1, y.shape[-1]))
        return out
    gy = g * y
    s = gy.sum(axis=-1, keepdims=True)
    gy -= y * s
    return gy


def gelu_fwd(x: np.ndarray) -> np.ndarray:
    if HAVE_NUMBA and x.flags.c_contiguous:
        out = np.empty_like(x)
        _gelu_fwd_1d(x.reshape(-1), out.reshape(-1))
        return out
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * (x2 * x)))
    return 0.5 * x * (1.0 + t)


def gelu_bwd(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    if HAVE_NUMBA and x.flags.c_contiguous and g.flags.c_contiguous:
        out = np.empty_like(x)
        _gelu_bwd_1d(x.reshape(-1), g.reshape(-1), out.reshape(-1))
        return out
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * (x2 * x)))
    d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 0.134145 * x2)
    return g * d
