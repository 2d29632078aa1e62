"""Numba-compiled kernels, signature-compatible with ``reference.py``.

Row-wise loops instead of numpy temporaries: on the small matrices this
engine runs (batches of 16, feature dims of tens), per-call numpy overhead
dominates and the jitted loops win by a wide margin (see
benchmarks/bench_backends.py). fastmath stays off so each backend is
bitwise-deterministic run to run.
"""

from __future__ import annotations

import numpy as np
from numba import njit

KL_TINY = 1e-12


@njit(cache=True)
def relu_fwd(x):
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            v = x[i, j]
            # np.maximum semantics: propagate NaN, clamp negatives to +0.0
            out[i, j] = v if v > 0.0 or v != v else 0.0
    return out


@njit(cache=True)
def relu_bwd(x, g):
    out = np.empty_like(g)
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            out[i, j] = g[i, j] if x[i, j] > 0.0 else 0.0
    return out


@njit(cache=True)
def softmax_fwd(x):
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        hi = x[i, 0]
        for j in range(1, x.shape[1]):
            if x[i, j] > hi:
                hi = x[i, j]
        total = 0.0
        for j in range(x.shape[1]):
            e = np.exp(x[i, j] - hi)
            out[i, j] = e
            total += e
        inv = 1.0 / total
        for j in range(x.shape[1]):
            out[i, j] *= inv
    return out


@njit(cache=True)
def softmax_bwd(p, g):
    out = np.empty_like(g)
    for i in range(p.shape[0]):
        inner = 0.0
        for j in range(p.shape[1]):
            inner += g[i, j] * p[i, j]
        for j in range(p.shape[1]):
            out[i, j] = p[i, j] * (g[i, j] - inner)
    return out


@njit(cache=True)
def log_softmax_fwd(x):
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        hi = x[i, 0]
        for j in range(1, x.shape[1]):
            if x[i, j] > hi:
                hi = x[i, j]
        total = 0.0
        for j in range(x.shape[1]):
            total += np.exp(x[i, j] - hi)
        lse = np.log(total)
        for j in range(x.shape[1]):
            out[i, j] = x[i, j] - hi - lse
    return out


@njit(cache=True)
def log_softmax_bwd(lp, g):
    out = np.empty_like(g)
    for i in range(lp.shape[0]):
        gsum = 0.0
        for j in range(lp.shape[1]):
            gsum += g[i, j]
        for j in range(lp.shape[1]):
            out[i, j] = g[i, j] - np.exp(lp[i, j]) * gsum
    return out


@njit(cache=True)
def layer_norm_fwd(x, eps):
    n, d = x.shape
    y = np.empty_like(x)
    inv_std = np.empty(n)
    floored = np.empty(n, dtype=np.bool_)
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += x[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            c = x[i, j] - mu
            var += c * c
        var /= d
        floored[i] = var < eps
        s = 1.0 / np.sqrt(eps if var < eps else var)
        inv_std[i] = s
        for j in range(d):
            y[i, j] = (x[i, j] - mu) * s
    return y, inv_std, floored


@njit(cache=True)
def layer_norm_bwd(y, inv_std, floored, g):
    n, d = y.shape
    out = np.empty_like(g)
    for i in range(n):
        g_mean = 0.0
        for j in range(d):
            g_mean += g[i, j]
        g_mean /= d
        proj = 0.0
        if not floored[i]:
            for j in range(d):
                proj += g[i, j] * y[i, j]
            proj /= d
        for j in range(d):
            out[i, j] = inv_std[i] * (g[i, j] - g_mean - y[i, j] * proj)
    return out


@njit(cache=True)
def cross_entropy_fwd(logits, labels):
    n, c = logits.shape
    probs = np.empty_like(logits)
    loss = 0.0
    for i in range(n):
        hi = logits[i, 0]
        for j in range(1, c):
            if logits[i, j] > hi:
                hi = logits[i, j]
        total = 0.0
        for j in range(c):
            e = np.exp(logits[i, j] - hi)
            probs[i, j] = e
            total += e
        inv = 1.0 / total
        for j in range(c):
            probs[i, j] *= inv
        loss -= logits[i, labels[i]] - hi - np.log(total)
    return loss / n, probs


@njit(cache=True)
def cross_entropy_bwd(probs, labels, g):
    n, c = probs.shape
    out = np.empty_like(probs)
    scale = g / n
    for i in range(n):
        for j in range(c):
            out[i, j] = probs[i, j] * scale
        out[i, labels[i]] -= scale
    return out


@njit(cache=True)
def kl_fwd(p, q):
    n, d = p.shape
    total = 0.0
    for i in range(n):
        for j in range(d):
            if p[i, j] > 0.0:
                qc = q[i, j] if q[i, j] > KL_TINY else KL_TINY
                total += p[i, j] * (np.log(p[i, j]) - np.log(qc))
    return total / n


@njit(cache=True)
def kl_bwd_p(p, q, g):
    n, d = p.shape
    out = np.zeros_like(p)
    scale = g / n
    for i in range(n):
        for j in range(d):
            if p[i, j] > 0.0:
                qc = q[i, j] if q[i, j] > KL_TINY else KL_TINY
                out[i, j] = (np.log(p[i, j]) - np.log(qc) + 1.0) * scale
    return out


@njit(cache=True)
def kl_bwd_q(p, q, g):
    n, d = p.shape
    out = np.zeros_like(q)
    scale = g / n
    for i in range(n):
        for j in range(d):
            if q[i, j] > KL_TINY:
                out[i, j] = -p[i, j] / q[i, j] * scale
    return out


@njit(cache=True)
def max_last_fwd(x):
    n = x.shape[0]
    vals = np.empty(n)
    idx = np.empty(n, dtype=np.int64)
    for i in range(n):
        best = x[i, 0]
        where = 0
        for j in range(1, x.shape[1]):
            if x[i, j] > best:
                best = x[i, j]
                where = j
        vals[i] = best
        idx[i] = where
    return vals, idx


@njit(cache=True)
def max_last_bwd(idx, g, n_cols):
    out = np.zeros((idx.shape[0], n_cols))
    for i in range(idx.shape[0]):
        out[i, idx[i]] = g[i]
    return out


@njit(cache=True)
def adam_update(p, g, m, v, t, lr, beta1, beta2, eps):
    n = p.shape[0]
    p_new = np.empty(n)
    m_new = np.empty(n)
    v_new = np.empty(n)
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for i in range(n):
        m_new[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
        v_new[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
        p_new[i] = p[i] - lr * (m_new[i] / c1) / (np.sqrt(v_new[i] / c2) + eps)
    return p_new, m_new, v_new
