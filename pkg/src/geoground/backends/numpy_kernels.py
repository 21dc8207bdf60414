"""Pure-numpy implementations of the hot row-wise kernels.

Matrix products elsewhere in the package go through BLAS; the kernels here
cover the fused per-row work (normalization, masked top-K softmax, evidence
aggregation, GELU) where a compiled loop pays off. `numba_kernels` implements
the same signatures; cross-backend parity is covered by tests.

All kernels take and return C-contiguous float64 arrays.
"""

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def layer_norm_fwd(x, gamma, beta, eps):
    """Row-wise layer norm with population variance.

    Returns (y, xhat, inv_std); xhat and inv_std are the backward cache.
    """
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    return gamma * xhat + beta, xhat, inv_std[:, 0].copy()


def layer_norm_bwd(dy, xhat, inv_std, gamma):
    """Full backward: returns (dx, dgamma, dbeta)."""
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * gamma
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = (dxhat - m1 - xhat * m2) * inv_std[:, None]
    return dx, dgamma, dbeta


def layer_norm_bwd_params(dy, xhat):
    """Affine-only backward (input gradient not needed for frozen features)."""
    return (dy * xhat).sum(axis=0), dy.sum(axis=0)


def gelu_fwd(x):
    """Exact (erf) GELU. Returns (y, cdf); the cdf feeds the backward pass."""
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    return x * cdf, cdf


def gelu_bwd(x, cdf, dy):
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return dy * (cdf + x * pdf)


def softmax_rows(z):
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def topk_softmax_fwd(logits, k):
    """Masked top-K softmax per row.

    Keeps the k largest entries (ties resolved to the lowest column), applies
    softmax over the kept values, zeros elsewhere. Returns (alpha, selected)
    where selected lists kept columns in descending preference order.
    """
    n, width = logits.shape
    k = min(k, width)
    # stable argsort of the negated row: equal values keep the lowest index
    order = np.argsort(-logits, axis=1, kind="stable")
    selected = np.ascontiguousarray(order[:, :k]).astype(np.int64)
    vals = np.take_along_axis(logits, selected, axis=1)
    e = np.exp(vals - vals[:, :1])  # column 0 holds the row max
    w = e / e.sum(axis=1, keepdims=True)
    alpha = np.zeros_like(logits)
    np.put_along_axis(alpha, selected, w, axis=1)
    return alpha, selected


def topk_softmax_bwd(dalpha, alpha, selected):
    """Subgradient through the masked softmax.

    The selected set is treated as constant: masked entries get exactly zero
    gradient, selected entries get the standard softmax Jacobian.
    """
    da = np.take_along_axis(dalpha, selected, axis=1)
    a = np.take_along_axis(alpha, selected, axis=1)
    inner = (da * a).sum(axis=1, keepdims=True)
    dvals = a * (da - inner)
    dlogits = np.zeros_like(alpha)
    np.put_along_axis(dlogits, selected, dvals, axis=1)
    return dlogits


def aggregate_fwd(alpha, bank):
    """g[b*t] = sum_l alpha[b*t, l] * bank[b, l, t]; bank is (B, L, T, D)."""
    b, nl, t, d = bank.shape
    g = np.einsum("btl,bltd->btd", alpha.reshape(b, t, nl), bank)
    return np.ascontiguousarray(g.reshape(b * t, d))


def aggregate_bwd(dg, alpha, bank):
    b, nl, t, d = bank.shape
    dg3 = dg.reshape(b, t, d)
    dalpha = np.einsum("btd,bltd->btl", dg3, bank).reshape(b * t, nl)
    dbank = np.einsum("btl,btd->bltd", alpha.reshape(b, t, nl), dg3)
    return np.ascontiguousarray(dalpha), dbank
