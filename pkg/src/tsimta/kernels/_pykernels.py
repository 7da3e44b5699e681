"""Pure numpy implementations of the hot kernels.

Every function here has a compiled twin in ``_ckernels.pyx`` with the same
signature. Arrays are float64, C-contiguous, and 2-D with the reduction over
the last axis unless stated otherwise.
"""
import numpy as np


def softmax_masked_fwd(x, mask):
    """Row-wise softmax restricted to ``mask``; masked entries come out exactly 0.

    Returns ``(y, n_empty)`` where ``n_empty`` counts rows without any valid entry.
    """
    valid = mask.astype(bool)
    n_empty = int(np.count_nonzero(~valid.any(axis=1)))
    shifted = np.where(valid, x, -np.inf)
    row_max = shifted.max(axis=1, keepdims=True)
    row_max[~np.isfinite(row_max)] = 0.0
    e = np.exp(shifted - row_max)
    s = e.sum(axis=1, keepdims=True)
    s[s == 0.0] = 1.0
    return e / s, n_empty


def softmax_masked_bwd(y, gy):
    dot = (gy * y).sum(axis=1, keepdims=True)
    return y * (gy - dot)


def layer_norm_fwd(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def layer_norm_bwd(gy, xhat, rstd, gamma):
    gxhat = gy * gamma
    ggamma = (gy * xhat).sum(axis=0)
    gbeta = gy.sum(axis=0)
    m1 = gxhat.mean(axis=1, keepdims=True)
    m2 = (gxhat * xhat).mean(axis=1, keepdims=True)
    gx = (gxhat - m1 - xhat * m2) * rstd[:, None]
    return gx, ggamma, gbeta


def causal_time_grid(t, valid):
    """Pairwise elapsed times and the causal attention mask for padded sequences.

    ``dt[b, i, j] = t[b, i] - t[b, j]`` wherever ``mask[b, i, j]`` is set and 0
    elsewhere. Position ``i`` may attend to ``j`` iff both are valid and
    ``t_j <= t_i``; padded rows attend only to themselves.
    """
    v = valid.astype(bool)
    diff = t[:, :, None] - t[:, None, :]
    mask = (diff >= 0.0) & v[:, :, None] & v[:, None, :]
    idx = np.arange(t.shape[1])
    pad_rows = ~v
    mask[:, idx, idx] |= pad_rows
    dt = np.where(mask, diff, 0.0)
    return dt, mask.astype(np.uint8)


def midrank(x):
    """1-based ranks with ties replaced by the mean of the ranks they span."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks_sorted = np.empty(n, dtype=np.float64)
    if n:
        starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
        ends = np.r_[starts[1:], n]
        avg = 0.5 * (starts + ends - 1) + 1.0
        ranks_sorted = np.repeat(avg, ends - starts)
    out = np.empty(n, dtype=np.float64)
    out[order] = ranks_sorted
    return out
