# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled embedding-bag kernels. Semantics match ``_kernels_py`` bit for bit."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def embedding_bag_forward(const double[:, ::1] emb, const long long[::1] tokens,
                          const long long[::1] offsets, long long mask_id):
    cdef Py_ssize_t n = offsets.shape[0] - 1
    cdef Py_ssize_t dim = emb.shape[1]
    cdef Py_ssize_t vocab = emb.shape[0]
    out_arr = np.zeros((n, dim), dtype=np.float64)
    counts_arr = np.zeros(n, dtype=np.int64)
    cdef double[:, ::1] out = out_arr
    cdef long long[::1] counts = counts_arr
    cdef Py_ssize_t i, j, e
    cdef long long t, c
    for i in range(n):
        c = 0
        for j in range(offsets[i], offsets[i + 1]):
            t = tokens[j]
            if t == mask_id:
                continue
            if t < 0 or t >= vocab:
                raise IndexError(f"token id {t} out of range for vocabulary of {vocab}")
            for e in range(dim):
                out[i, e] += emb[t, e]
            c += 1
        counts[i] = c
        if c > 0:
            for e in range(dim):
                out[i, e] = out[i, e] / c
    return out_arr, counts_arr


def embedding_bag_backward(const double[:, ::1] grad_pooled, const long long[::1] tokens,
                           const long long[::1] offsets, const long long[::1] counts,
                           long long mask_id, double[:, ::1] grad_emb):
    cdef Py_ssize_t n = offsets.shape[0] - 1
    cdef Py_ssize_t dim = grad_emb.shape[1]
    cdef Py_ssize_t i, j, e
    cdef long long t, c
    for i in range(n):
        c = counts[i]
        if c == 0:
            continue
        for j in range(offsets[i], offsets[i + 1]):
            t = tokens[j]
            if t == mask_id:
                continue
            for e in range(dim):
                grad_emb[t, e] += grad_pooled[i, e] / c
