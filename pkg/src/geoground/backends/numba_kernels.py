"""Numba @njit builds of the hot row-wise kernels.

Same signatures and semantics as `numpy_kernels`. Loops are written out so
numba fuses the per-row passes; fastmath stays off because the gradient
checker and the bitwise invariants need IEEE-conforming arithmetic.
"""

import math

import numpy as np
from numba import njit

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@njit(cache=True)
def layer_norm_fwd(x, gamma, beta, eps):
    n, d = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    inv_std = np.empty(n, dtype=np.float64)
    for i in range(n):
        s = 0.0
        for j in range(d):
            s += x[i, j]
        mu = s / d
        q = 0.0
        for j in range(d):
            t = x[i, j] - mu
            q += t * t
        istd = 1.0 / math.sqrt(q / d + eps)
        inv_std[i] = istd
        for j in range(d):
            h = (x[i, j] - mu) * istd
            xhat[i, j] = h
            y[i, j] = gamma[j] * h + beta[j]
    return y, xhat, inv_std


@njit(cache=True)
def layer_norm_bwd(dy, xhat, inv_std, gamma):
    n, d = dy.shape
    dx = np.empty_like(dy)
    dgamma = np.zeros(d, dtype=np.float64)
    dbeta = np.zeros(d, dtype=np.float64)
    for i in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            g = dy[i, j]
            h = xhat[i, j]
            dgamma[j] += g * h
            dbeta[j] += g
            dh = g * gamma[j]
            m1 += dh
            m2 += dh * h
        m1 /= d
        m2 /= d
        for j in range(d):
            dh = dy[i, j] * gamma[j]
            dx[i, j] = (dh - m1 - xhat[i, j] * m2) * inv_std[i]
    return dx, dgamma, dbeta


@njit(cache=True)
def layer_norm_bwd_params(dy, xhat):
    n, d = dy.shape
    dgamma = np.zeros(d, dtype=np.float64)
    dbeta = np.zeros(d, dtype=np.float64)
    for i in range(n):
        for j in range(d):
            dgamma[j] += dy[i, j] * xhat[i, j]
            dbeta[j] += dy[i, j]
    return dgamma, dbeta


@njit(cache=True)
def gelu_fwd(x):
    n, d = x.shape
    y = np.empty_like(x)
    cdf = np.empty_like(x)
    for i in range(n):
        for j in range(d):
            v = x[i, j]
            c = 0.5 * (1.0 + math.erf(v * _INV_SQRT2))
            cdf[i, j] = c
            y[i, j] = v * c
    return y, cdf


@njit(cache=True)
def gelu_bwd(x, cdf, dy):
    n, d = x.shape
    dx = np.empty_like(x)
    for i in range(n):
        for j in range(d):
            v = x[i, j]
            pdf = _INV_SQRT_2PI * math.exp(-0.5 * v * v)
            dx[i, j] = dy[i, j] * (cdf[i, j] + v * pdf)
    return dx


@njit(cache=True)
def softmax_rows(z):
    n, d = z.shape
    p = np.empty_like(z)
    for i in range(n):
        m = z[i, 0]
        for j in range(1, d):
            if z[i, j] > m:
                m = z[i, j]
        s = 0.0
        for j in range(d):
            e = math.exp(z[i, j] - m)
            p[i, j] = e
            s += e
        for j in range(d):
            p[i, j] /= s
    return p


@njit(cache=True)
def topk_softmax_fwd(logits, k):
    n, width = logits.shape
    kk = k if k < width else width
    alpha = np.zeros((n, width), dtype=np.float64)
    selected = np.empty((n, kk), dtype=np.int64)
    for i in range(n):
        taken = np.zeros(width, dtype=np.bool_)
        for pick in range(kk):
            best = -1
            bestv = 0.0
            for j in range(width):
                if taken[j]:
                    continue
                # strict '>' keeps the lowest column among ties
                if best < 0 or logits[i, j] > bestv:
                    best = j
                    bestv = logits[i, j]
            taken[best] = True
            selected[i, pick] = best
        m = logits[i, selected[i, 0]]
        s = 0.0
        for pick in range(kk):
            e = math.exp(logits[i, selected[i, pick]] - m)
            alpha[i, selected[i, pick]] = e
            s += e
        for pick in range(kk):
            alpha[i, selected[i, pick]] /= s
    return alpha, selected


@njit(cache=True)
def topk_softmax_bwd(dalpha, alpha, selected):
    n, width = alpha.shape
    kk = selected.shape[1]
    dlogits = np.zeros((n, width), dtype=np.float64)
    for i in range(n):
        inner = 0.0
        for pick in range(kk):
            j = selected[i, pick]
            inner += dalpha[i, j] * alpha[i, j]
        for pick in range(kk):
            j = selected[i, pick]
            dlogits[i, j] = alpha[i, j] * (dalpha[i, j] - inner)
    return dlogits


@njit(cache=True)
def aggregate_fwd(alpha, bank):
    b, nl, t, d = bank.shape
    g = np.zeros((b * t, d), dtype=np.float64)
    for bi in range(b):
        for ti in range(t):
            row = bi * t + ti
            for l in range(nl):
                a = alpha[row, l]
                if a != 0.0:
                    for j in range(d):
                        g[row, j] += a * bank[bi, l, ti, j]
    return g


@njit(cache=True)
def aggregate_bwd(dg, alpha, bank):
    b, nl, t, d = bank.shape
    dalpha = np.zeros((b * t, nl), dtype=np.float64)
    dbank = np.zeros((b, nl, t, d), dtype=np.float64)
    for bi in range(b):
        for ti in range(t):
            row = bi * t + ti
            for l in range(nl):
                s = 0.0
                for j in range(d):
                    s += dg[row, j] * bank[bi, l, ti, j]
                dalpha[row, l] = s
                a = alpha[row, l]
                if a != 0.0:
                    for j in range(d):
                        dbank[bi, l, ti, j] = a * dg[row, j]
    return dalpha, dbank
