"""Pure-numpy kernels. Reference path and fallback when numba is disabled."""

import math

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu_forward(x):
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_backward(x, g):
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return g * (cdf + x * pdf)


def layernorm_forward(x2, gain, bias, eps):
    """Rows of ``x2`` (n, d). Returns (y, xhat, rstd)."""
    mu = x2.mean(axis=1, keepdims=True)
    xc = x2 - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd[:, 0]


def layernorm_backward(g2, xhat, rstd, gain):
    gx = g2 * gain
    m1 = gx.mean(axis=1, keepdims=True)
    m2 = (gx * xhat).mean(axis=1, keepdims=True)
    dx = rstd[:, None] * (gx - m1 - xhat * m2)
    return dx, (g2 * xhat).sum(axis=0), g2.sum(axis=0)


def chunked_attention_forward(q, k, v, chunk):
    """q, k, v: (b, n, d). Streams key blocks per query block.

    Returns the output and the per-row log-sum-exp; no n x n buffer is formed.
    """
    b, n, d = q.shape
    scale = 1.0 / math.sqrt(d)
    out = np.empty_like(q)
    lse = np.empty((b, n))
    for i0 in range(0, n, chunk):
        qi = q[:, i0:i0 + chunk] * scale
        m = np.full((b, qi.shape[1], 1), -np.inf)
        den = np.zeros((b, qi.shape[1], 1))
        acc = np.zeros_like(qi)
        for j0 in range(0, n, chunk):
            s = qi @ k[:, j0:j0 + chunk].transpose(0, 2, 1)
            m_new = np.maximum(m, s.max(axis=2, keepdims=True))
            corr = np.exp(m - m_new)
            p = np.exp(s - m_new)
            den = den * corr + p.sum(axis=2, keepdims=True)
            acc = acc * corr + p @ v[:, j0:j0 + chunk]
            m = m_new
        out[:, i0:i0 + chunk] = acc / den
        lse[:, i0:i0 + chunk] = (m + np.log(den))[:, :, 0]
    return out, lse


def chunked_attention_backward(q, k, v, out, lse, g, chunk):
    b, n, d = q.shape
    scale = 1.0 / math.sqrt(d)
    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    delta = (g * out).sum(axis=2)
    for i0 in range(0, n, chunk):
        qi = q[:, i0:i0 + chunk]
        gi = g[:, i0:i0 + chunk]
        li = lse[:, i0:i0 + chunk, None]
        di = delta[:, i0:i0 + chunk, None]
        for j0 in range(0, n, chunk):
            kj = k[:, j0:j0 + chunk]
            vj = v[:, j0:j0 + chunk]
            p = np.exp((qi @ kj.transpose(0, 2, 1)) * scale - li)
            dv[:, j0:j0 + chunk] += p.transpose(0, 2, 1) @ gi
            ds = p * (gi @ vj.transpose(0, 2, 1) - di)
            dq[:, i0:i0 + chunk] += (ds @ kj) * scale
            dk[:, j0:j0 + chunk] += (ds.transpose(0, 2, 1) @ qi) * scale
    return dq, dk, dv


def filter_valid(img, w):
    """Separable 'valid' correlation of a 2D image with 1D window ``w`` on both axes."""
    r = np.lib.stride_tricks.sliding_window_view(img, w.size, axis=1) @ w
    return np.lib.stride_tricks.sliding_window_view(r, w.size, axis=0) @ w
