# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled per-item kernels over the flat logit layout.

Layout: position ``i`` (0-based) occupies ``logits[offsets[i] : offsets[i+1]]``
as a C-ordered ``(rows, V**i, V)`` block.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log

cnp.import_array()


cdef inline double _slot_lse(const double[::1] logits, Py_ssize_t base, Py_ssize_t V) noexcept nogil:
    cdef double m = logits[base]
    cdef double s = 0.0
    cdef Py_ssize_t v
    for v in range(1, V):
        if logits[base + v] > m:
            m = logits[base + v]
    for v in range(V):
        s += exp(logits[base + v] - m)
    return m + log(s)


def batch_log_prob(const double[::1] logits, const long[::1] offsets, long V,
                   const long[::1] conds, const long[:, ::1] tokens):
    cdef Py_ssize_t K = tokens.shape[0], N = tokens.shape[1]
    cdef Py_ssize_t k, i, base
    cdef long prefix, npref, x
    cdef double acc
    out = np.empty(K, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for k in range(K):
            prefix = 0
            npref = 1
            acc = 0.0
            for i in range(N):
                x = tokens[k, i]
                base = offsets[i] + (conds[k] * npref + prefix) * V
                acc += logits[base + x] - _slot_lse(logits, base, V)
                prefix = prefix * V + x
                npref *= V
            o[k] = acc
    return out


def batch_grad(const double[::1] logits, const long[::1] offsets, long V,
               const long[::1] conds, const long[:, ::1] tokens,
               const double[::1] weights, double[::1] out):
    """Accumulate ``sum_k w_k * d log p(x_k | c_k) / d logits`` into ``out``."""
    cdef Py_ssize_t K = tokens.shape[0], N = tokens.shape[1]
    cdef Py_ssize_t k, i, v, base
    cdef long prefix, npref, x
    cdef double lse, w
    with nogil:
        for k in range(K):
            w = weights[k]
            if w == 0.0:
                continue
            prefix = 0
            npref = 1
            for i in range(N):
                x = tokens[k, i]
                base = offsets[i] + (conds[k] * npref + prefix) * V
                lse = _slot_lse(logits, base, V)
                for v in range(V):
                    out[base + v] -= w * exp(logits[base + v] - lse)
                out[base + x] += w
                prefix = prefix * V + x
                npref *= V


def batch_sample(const double[::1] logits, const long[::1] offsets, long V,
                 const long[::1] conds, const double[:, ::1] uniforms):
    cdef Py_ssize_t K = uniforms.shape[0], N = uniforms.shape[1]
    cdef Py_ssize_t k, i, v, base
    cdef long prefix, npref, x
    cdef double m, total, cum, u
    out = np.empty((K, N), dtype=np.int64)
    cdef long[:, ::1] o = out
    with nogil:
        for k in range(K):
            prefix = 0
            npref = 1
            for i in range(N):
                base = offsets[i] + (conds[k] * npref + prefix) * V
                m = logits[base]
                for v in range(1, V):
                    if logits[base + v] > m:
                        m = logits[base + v]
                total = 0.0
                for v in range(V):
                    total += exp(logits[base + v] - m)
                u = uniforms[k, i] * total
                cum = 0.0
                x = V - 1
                for v in range(V):
                    cum += exp(logits[base + v] - m)
                    if u < cum:
                        x = v
                        break
                o[k, i] = x
                prefix = prefix * V + x
                npref *= V
    return out
