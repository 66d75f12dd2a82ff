"""Numpy implementations of the per-item kernels in ``_ckernels.pyx``.

Vectorized across batch items, looping over positions only.
"""
import numpy as np


def _slots(offsets, V, conds, tokens):
    K, N = tokens.shape
    prefix = np.zeros(K, dtype=np.int64)
    npref = 1
    for i in range(N):
        yield i, offsets[i] + (conds * npref + prefix) * V
        prefix = prefix * V + tokens[:, i]
        npref *= V


def _rows(logits, base, V):
    rows = logits[base[:, None] + np.arange(V)]
    m = rows.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(rows - m).sum(axis=1))
    return rows, lse


def batch_log_prob(logits, offsets, V, conds, tokens):
    out = np.zeros(tokens.shape[0])
    ar = np.arange(tokens.shape[0])
    for i, base in _slots(offsets, V, conds, tokens):
        rows, lse = _rows(logits, base, V)
        out += rows[ar, tokens[:, i]] - lse
    return out


def batch_grad(logits, offsets, V, conds, tokens, weights, out):
    for i, base in _slots(offsets, V, conds, tokens):
        rows, lse = _rows(logits, base, V)
        p = np.exp(rows - lse[:, None])
        np.add.at(out, base[:, None] + np.arange(V), -weights[:, None] * p)
        np.add.at(out, base + tokens[:, i], weights)


def batch_sample(logits, offsets, V, conds, uniforms):
    K, N = uniforms.shape
    out = np.empty((K, N), dtype=np.int64)
    prefix = np.zeros(K, dtype=np.int64)
    npref = 1
    for i in range(N):
        base = offsets[i] + (conds * npref + prefix) * V
        rows = logits[base[:, None] + np.arange(V)]
        e = np.exp(rows - rows.max(axis=1, keepdims=True))
        cum = np.cumsum(e, axis=1)
        u = uniforms[:, i] * cum[:, -1]
        x = np.minimum((u[:, None] >= cum).sum(axis=1), V - 1)
        out[:, i] = x
        prefix = prefix * V + x
        npref *= V
    return out
