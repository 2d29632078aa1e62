"""Pure-numpy reference kernels.

Every function here has a numba twin in ``jit.py`` with the same signature.
All arrays are float64, C-contiguous, 2-D unless noted. These are the hot
row-wise loops of the training step; keep them allocation-light and free of
data-dependent branching so both backends stay deterministic.
"""

from __future__ import annotations

import numpy as np

KL_TINY = 1e-12


def relu_fwd(x):
    return np.maximum(x, 0.0)


def relu_bwd(x, g):
    return np.where(x > 0.0, g, 0.0)


def softmax_fwd(x):
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd(p, g):
    inner = (g * p).sum(axis=1, keepdims=True)
    return p * (g - inner)


def log_softmax_fwd(x):
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return shifted - lse


def log_softmax_bwd(lp, g):
    return g - np.exp(lp) * g.sum(axis=1, keepdims=True)


def layer_norm_fwd(x, eps):
    """Row-normalize to mean 0, variance 1.

    eps acts as a variance floor (std = sqrt(max(var, eps))) so that any row
    with variance above eps comes out with variance exactly 1 up to rounding.
    Returns (y, inv_std, floored) with per-row inv_std and floor flags, both
    needed by the backward pass.
    """
    mu = x.mean(axis=1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=1)
    floored = var < eps
    inv_std = 1.0 / np.sqrt(np.where(floored, eps, var))
    y = centered * inv_std[:, None]
    return y, inv_std, floored


def layer_norm_bwd(y, inv_std, floored, g):
    # var > eps: d/dx of (x - mu)/sigma(x); floored rows: sigma is constant.
    g_mean = g.mean(axis=1, keepdims=True)
    proj = np.where(floored[:, None], 0.0, (g * y).mean(axis=1, keepdims=True))
    return inv_std[:, None] * (g - g_mean - y * proj)


def cross_entropy_fwd(logits, labels):
    """Mean negative log-likelihood; returns (loss, probs) with probs cached
    for the backward pass."""
    lp = log_softmax_fwd(logits)
    n = logits.shape[0]
    loss = -lp[np.arange(n), labels].sum() / n
    return loss, np.exp(lp)


def cross_entropy_bwd(probs, labels, g):
    n = probs.shape[0]
    out = probs.copy()
    out[np.arange(n), labels] -= 1.0
    out *= g / n
    return out


def kl_fwd(p, q):
    """Row-mean of sum_j p_j * (ln p_j - ln q_j).

    Terms with p == 0 contribute exactly 0; q is clamped below at KL_TINY so
    a vanishing q never produces an infinity.
    """
    qc = np.maximum(q, KL_TINY)
    terms = np.where(p > 0.0, p * (np.log(np.where(p > 0.0, p, 1.0)) - np.log(qc)), 0.0)
    return terms.sum() / p.shape[0]


def kl_bwd_p(p, q, g):
    qc = np.maximum(q, KL_TINY)
    grad = np.where(p > 0.0, np.log(np.where(p > 0.0, p, 1.0)) - np.log(qc) + 1.0, 0.0)
    return grad * (g / p.shape[0])


def kl_bwd_q(p, q, g):
    # Subgradient 0 where the clamp binds.
    grad = np.where(q > KL_TINY, -p / np.maximum(q, KL_TINY), 0.0)
    return grad * (g / p.shape[0])


def max_last_fwd(x):
    idx = x.argmax(axis=1)
    return x[np.arange(x.shape[0]), idx], idx


def max_last_bwd(idx, g, n_cols):
    out = np.zeros((idx.shape[0], n_cols))
    out[np.arange(idx.shape[0]), idx] = g
    return out


def adam_update(p, g, m, v, t, lr, beta1, beta2, eps):
    """Bias-corrected Adam on flat arrays; returns new (p, m, v)."""
    m_new = beta1 * m + (1.0 - beta1) * g
    v_new = beta2 * v + (1.0 - beta2) * g * g
    m_hat = m_new / (1.0 - beta1**t)
    v_hat = v_new / (1.0 - beta2**t)
    p_new = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return p_new, m_new, v_new
