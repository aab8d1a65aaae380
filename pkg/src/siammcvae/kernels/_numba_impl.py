"""numba-compiled versions of the kernels in ``_numpy_impl``.

Signatures and return conventions match the numpy path exactly.
"""

import math

import numpy as np
from numba import njit

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


@njit(cache=True)
def _gelu_fwd_flat(x, out):
    for i in range(x.size):
        xi = x[i]
        out[i] = 0.5 * xi * (1.0 + math.erf(xi * _INV_SQRT2))


@njit(cache=True)
def _gelu_bwd_flat(x, g, out):
    for i in range(x.size):
        xi = x[i]
        cdf = 0.5 * (1.0 + math.erf(xi * _INV_SQRT2))
        pdf = _INV_SQRT2PI * math.exp(-0.5 * xi * xi)
        out[i] = g[i] * (cdf + xi * pdf)


def gelu_forward(x):
    xf = np.ascontiguousarray(x).ravel()
    out = np.empty_like(xf)
    _gelu_fwd_flat(xf, out)
    return out.reshape(x.shape)


def gelu_backward(x, g):
    xf = np.ascontiguousarray(x).ravel()
    gf = np.ascontiguousarray(g).ravel()
    out = np.empty_like(xf)
    _gelu_bwd_flat(xf, gf, out)
    return out.reshape(x.shape)


@njit(cache=True)
def _layernorm_fwd(x, gain, bias, eps, y, xhat, rstd):
    n, d = x.shape
    for r in range(n):
        mu = 0.0
        for c in range(d):
            mu += x[r, c]
        mu /= d
        var = 0.0
        for c in range(d):
            t = x[r, c] - mu
            var += t * t
        var /= d
        rs = 1.0 / math.sqrt(var + eps)
        rstd[r] = rs
        for c in range(d):
            h = (x[r, c] - mu) * rs
            xhat[r, c] = h
            y[r, c] = h * gain[c] + bias[c]


@njit(cache=True)
def _layernorm_bwd(g, xhat, rstd, gain, dx, dgain, dbias):
    n, d = g.shape
    for c in range(d):
        dgain[c] = 0.0
        dbias[c] = 0.0
    for r in range(n):
        m1 = 0.0
        m2 = 0.0
        for c in range(d):
            gx = g[r, c] * gain[c]
            m1 += gx
            m2 += gx * xhat[r, c]
            dgain[c] += g[r, c] * xhat[r, c]
            dbias[c] += g[r, c]
        m1 /= d
        m2 /= d
        for c in range(d):
            dx[r, c] = rstd[r] * (g[r, c] * gain[c] - m1 - xhat[r, c] * m2)


def layernorm_forward(x2, gain, bias, eps):
    x2 = np.ascontiguousarray(x2)
    y = np.empty_like(x2)
    xhat = np.empty_like(x2)
    rstd = np.empty(x2.shape[0])
    _layernorm_fwd(x2, np.ascontiguousarray(gain), np.ascontiguousarray(bias), eps, y, xhat, rstd)
    return y, xhat, rstd


def layernorm_backward(g2, xhat, rstd, gain):
    g2 = np.ascontiguousarray(g2)
    dx = np.empty_like(g2)
    dgain = np.empty(g2.shape[1])
    dbias = np.empty(g2.shape[1])
    _layernorm_bwd(g2, xhat, rstd, np.ascontiguousarray(gain), dx, dgain, dbias)
    return dx, dgain, dbias


@njit(cache=True)
def _chunked_fwd(q, k, v, chunk, out, lse):
    b, n, d = q.shape
    scale = 1.0 / math.sqrt(d)
    s = np.empty(chunk)
    acc = np.empty(d)
    for h in range(b):
        for i in range(n):
            m = -np.inf
            den = 0.0
            acc[:] = 0.0
            for j0 in range(0, n, chunk):
                j1 = min(j0 + chunk, n)
                bm = -np.inf
                for j in range(j0, j1):
                    t = 0.0
                    for c in range(d):
                        t += q[h, i, c] * k[h, j, c]
                    t *= scale
                    s[j - j0] = t
                    if t > bm:
                        bm = t
                m_new = max(m, bm)
                corr = math.exp(m - m_new)
                den *= corr
                for c in range(d):
                    acc[c] *= corr
                for j in range(j0, j1):
                    p = math.exp(s[j - j0] - m_new)
                    den += p
                    for c in range(d):
                        acc[c] += p * v[h, j, c]
                m = m_new
            for c in range(d):
                out[h, i, c] = acc[c] / den
            lse[h, i] = m + math.log(den)


@njit(cache=True)
def _chunked_bwd(q, k, v, out, lse, g, chunk, dq, dk, dv):
    b, n, d = q.shape
    scale = 1.0 / math.sqrt(d)
    for h in range(b):
        for i in range(n):
            delta = 0.0
            for c in range(d):
                delta += g[h, i, c] * out[h, i, c]
            for j0 in range(0, n, chunk):
                j1 = min(j0 + chunk, n)
                for j in range(j0, j1):
                    t = 0.0
                    dp = 0.0
                    for c in range(d):
                        t += q[h, i, c] * k[h, j, c]
                        dp += g[h, i, c] * v[h, j, c]
                    p = math.exp(t * scale - lse[h, i])
                    ds = p * (dp - delta) * scale
                    for c in range(d):
                        dv[h, j, c] += p * g[h, i, c]
                        dq[h, i, c] += ds * k[h, j, c]
                        dk[h, j, c] += ds * q[h, i, c]


def chunked_attention_forward(q, k, v, chunk):
    q, k, v = (np.ascontiguousarray(a) for a in (q, k, v))
    out = np.empty_like(q)
    lse = np.empty(q.shape[:2])
    _chunked_fwd(q, k, v, chunk, out, lse)
    return out, lse


def chunked_attention_backward(q, k, v, out, lse, g, chunk):
    q, k, v, out, g = (np.ascontiguousarray(a) for a in (q, k, v, out, g))
    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    _chunked_bwd(q, k, v, out, np.ascontiguousarray(lse), g, chunk, dq, dk, dv)
    return dq, dk, dv


@njit(cache=True)
def _filter_valid(img, w, out):
    h, wd = img.shape
    r = w.size
    oh, ow = out.shape
    tmp = np.empty((h, ow))
    for y in range(h):
        for x in range(ow):
            t = 0.0
            for u in range(r):
                t += img[y, x + u] * w[u]
            tmp[y, x] = t
    for y in range(oh):
        for x in range(ow):
            t = 0.0
            for u in range(r):
                t += tmp[y + u, x] * w[u]
            out[y, x] = t


def filter_valid(img, w):
    img = np.ascontiguousarray(img, dtype=np.float64)
    out = np.empty((img.shape[0] - w.size + 1, img.shape[1] - w.size + 1))
    _filter_valid(img, np.ascontiguousarray(w, dtype=np.float64), out)
    return out
