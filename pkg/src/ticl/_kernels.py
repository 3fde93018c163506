"""Row-wise numeric kernels used by the autodiff ops.

Each kernel exists twice: a numba ``@njit`` version and a pure-numpy
version with the same signature. The numba path is used when numba imports
and ``TICL_DISABLE_NUMBA`` is unset or ``0``. Both paths are deterministic and
single-threaded, so results are bit-reproducible for a fixed path; the two
paths agree to rounding, not bitwise.

All kernels take C-contiguous 2-D arrays (rows x features) and accumulate
reductions in float64 regardless of the storage dtype.
"""

from __future__ import annotations

import math
import os
from types import SimpleNamespace

import numpy as np
from scipy.special import erf as _np_erf

_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


# -- numpy reference path ---------------------------------------------------

def _np_layer_norm_fwd(x, gamma, beta, eps):
    x64 = x.astype(np.float64)
    mean = x64.mean(axis=1, keepdims=True)
    var = ((x64 - mean) ** 2).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x64 - mean) * rstd
    y = xhat * gamma.astype(np.float64) + beta.astype(np.float64)
    return y.astype(x.dtype), xhat.astype(x.dtype), rstd[:, 0].astype(x.dtype)


def _np_layer_norm_bwd(g, xhat, rstd, gamma):
    g64 = g.astype(np.float64)
    xh = xhat.astype(np.float64)
    dgamma = (g64 * xh).sum(axis=0)
    dbeta = g64.sum(axis=0)
    gx = g64 * gamma.astype(np.float64)
    n = xh.shape[1]
    dx = (gx - gx.sum(axis=1, keepdims=True) / n
          - xh * (gx * xh).sum(axis=1, keepdims=True) / n)
    dx *= rstd.astype(np.float64)[:, None]
    dt = g.dtype
    return dx.astype(dt), dgamma.astype(dt), dbeta.astype(dt)


def _np_softmax_fwd(x):
    x64 = x.astype(np.float64)
    e = np.exp(x64 - x64.max(axis=1, keepdims=True))
    return (e / e.sum(axis=1, keepdims=True)).astype(x.dtype)


def _np_softmax_bwd(g, y):
    g64 = g.astype(np.float64)
    y64 = y.astype(np.float64)
    dot = (g64 * y64).sum(axis=1, keepdims=True)
    return (y64 * (g64 - dot)).astype(g.dtype)


def _np_gelu_fwd(x):
    x64 = x.astype(np.float64)
    return (0.5 * x64 * (1.0 + _np_erf(x64 * _SQRT_HALF))).astype(x.dtype)


def _np_gelu_bwd(g, x):
    x64 = x.astype(np.float64)
    cdf = 0.5 * (1.0 + _np_erf(x64 * _SQRT_HALF))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x64 * x64)
    return (g.astype(np.float64) * (cdf + x64 * pdf)).astype(g.dtype)


numpy_impl = SimpleNamespace(
    name="numpy",
    layer_norm_fwd=_np_layer_norm_fwd,
    layer_norm_bwd=_np_layer_norm_bwd,
    softmax_fwd=_np_softmax_fwd,
    softmax_bwd=_np_softmax_bwd,
    gelu_fwd=_np_gelu_fwd,
    gelu_bwd=_np_gelu_bwd,
)


# -- numba path -------------------------------------------------------------

def _build_numba_impl():
    from numba import njit

    @njit(cache=True)
    def layer_norm_fwd(x, gamma, beta, eps):
        rows, cols = x.shape
        y = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(rows, dtype=x.dtype)
        for i in range(rows):
            s = 0.0
            for j in range(cols):
                s += np.float64(x[i, j])
            mean = s / cols
            v = 0.0
            for j in range(cols):
                d = np.float64(x[i, j]) - mean
                v += d * d
            r = 1.0 / math.sqrt(v / cols + eps)
            rstd[i] = r
            for j in range(cols):
                h = (np.float64(x[i, j]) - mean) * r
                xhat[i, j] = h
                y[i, j] = h * np.float64(gamma[j]) + np.float64(beta[j])
        return y, xhat, rstd

    @njit(cache=True)
    def layer_norm_bwd(g, xhat, rstd, gamma):
        rows, cols = g.shape
        dx = np.empty_like(g)
        dgamma64 = np.zeros(cols, dtype=np.float64)
        dbeta64 = np.zeros(cols, dtype=np.float64)
        for i in range(rows):
            s1 = 0.0
            s2 = 0.0
            for j in range(cols):
                gj = np.float64(g[i, j])
                hj = np.float64(xhat[i, j])
                dgamma64[j] += gj * hj
                dbeta64[j] += gj
                gx = gj * np.float64(gamma[j])
                s1 += gx
                s2 += gx * hj
            r = np.float64(rstd[i])
            for j in range(cols):
                gx = np.float64(g[i, j]) * np.float64(gamma[j])
                hj = np.float64(xhat[i, j])
                dx[i, j] = (gx - s1 / cols - hj * s2 / cols) * r
        dgamma = np.empty_like(gamma)
        dbeta = np.empty_like(gamma)
        for j in range(cols):
            dgamma[j] = dgamma64[j]
            dbeta[j] = dbeta64[j]
        return dx, dgamma, dbeta

    @njit(cache=True)
    def softmax_fwd(x):
        rows, cols = x.shape
        y = np.empty_like(x)
        buf = np.empty(cols, dtype=np.float64)
        for i in range(rows):
            m = np.float64(x[i, 0])
            for j in range(1, cols):
                if x[i, j] > m:
                    m = np.float64(x[i, j])
            s = 0.0
            for j in range(cols):
                e = math.exp(np.float64(x[i, j]) - m)
                buf[j] = e
                s += e
            for j in range(cols):
                y[i, j] = buf[j] / s
        return y

    @njit(cache=True)
    def softmax_bwd(g, y):
        rows, cols = g.shape
        dx = np.empty_like(g)
        for i in range(rows):
            dot = 0.0
            for j in range(cols):
                dot += np.float64(g[i, j]) * np.float64(y[i, j])
            for j in range(cols):
                dx[i, j] = np.float64(y[i, j]) * (np.float64(g[i, j]) - dot)
        return dx

    @njit(cache=True)
    def gelu_fwd(x):
        rows, cols = x.shape
        y = np.empty_like(x)
        for i in range(rows):
            for j in range(cols):
                v = np.float64(x[i, j])
                y[i, j] = 0.5 * v * (1.0 + math.erf(v * _SQRT_HALF))
        return y

    @njit(cache=True)
    def gelu_bwd(g, x):
        rows, cols = x.shape
        dx = np.empty_like(g)
        for i in range(rows):
            for j in range(cols):
                v = np.float64(x[i, j])
                cdf = 0.5 * (1.0 + math.erf(v * _SQRT_HALF))
                pdf = _INV_SQRT_2PI * math.exp(-0.5 * v * v)
                dx[i, j] = np.float64(g[i, j]) * (cdf + v * pdf)
        return dx

    return SimpleNamespace(
        name="numba",
        layer_norm_fwd=layer_norm_fwd,
        layer_norm_bwd=layer_norm_bwd,
        softmax_fwd=softmax_fwd,
        softmax_bwd=softmax_bwd,
        gelu_fwd=gelu_fwd,
        gelu_bwd=gelu_bwd,
    )


def _numba_requested() -> bool:
    return os.environ.get("TICL_DISABLE_NUMBA", "0").strip().lower() in ("", "0", "false", "no")


numba_impl = None
if _numba_requested():
    try:
        numba_impl = _build_numba_impl()
    except ImportError:  # pragma: no cover - numba is optional at runtime
        numba_impl = None

active = numba_impl if numba_impl is not None else numpy_impl
