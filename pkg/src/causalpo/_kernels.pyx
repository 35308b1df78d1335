# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops. Signatures and summation order mirror ``_fallback``."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def context_rows(const long[:, ::1] texts, long vocab_size, long order,
                 const long[::1] offsets):
    cdef Py_ssize_t n = texts.shape[0], length = texts.shape[1]
    cdef Py_ssize_t i, t, j, start
    cdef long code
    out = np.empty((n, length), dtype=np.int64)
    cdef long[:, ::1] rows = out
    with nogil:
        for i in range(n):
            for t in range(length):
                start = t - order if t > order else 0
                code = 0
                for j in range(start, t):
                    code = code * vocab_size + texts[i, j]
                rows[i, t] = offsets[t] + code
    return out


def gather_sum(const double[:, ::1] table, const long[:, ::1] rows,
               const long[:, ::1] texts):
    cdef Py_ssize_t n = texts.shape[0], length = texts.shape[1]
    cdef Py_ssize_t i, t
    cdef double s
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] res = out
    with nogil:
        for i in range(n):
            s = table[rows[i, 0], texts[i, 0]]
            for t in range(1, length):
                s = s + table[rows[i, t], texts[i, t]]
            res[i] = s
    return out


def accumulate_score(double[:, ::1] grad, const double[:, ::1] probs,
                     const long[:, ::1] rows, const long[:, ::1] texts,
                     const double[::1] coef):
    cdef Py_ssize_t n = texts.shape[0], length = texts.shape[1]
    cdef Py_ssize_t n_rows = grad.shape[0], vocab = grad.shape[1]
    cdef Py_ssize_t i, t, r, v
    cdef double c
    row_weight = np.zeros(n_rows, dtype=np.float64)
    cdef double[::1] rw = row_weight
    with nogil:
        for i in range(n):
            c = coef[i]
            for t in range(length):
                r = rows[i, t]
                grad[r, texts[i, t]] += c
                rw[r] += c
        for r in range(n_rows):
            if rw[r] != 0.0:
                for v in range(vocab):
                    grad[r, v] -= rw[r] * probs[r, v]


def sample_texts(const double[:, ::1] cdf, const double[:, ::1] u,
                 long order, const long[::1] offsets):
    cdef Py_ssize_t n = u.shape[0], length = u.shape[1]
    cdef long vocab = cdf.shape[1]
    cdef Py_ssize_t i, t, j, start
    cdef long code, r, v
    cdef double x
    out = np.empty((n, length), dtype=np.int64)
    cdef long[:, ::1] texts = out
    with nogil:
        for i in range(n):
            for t in range(length):
                start = t - order if t > order else 0
                code = 0
                for j in range(start, t):
                    code = code * vocab + texts[i, j]
                r = offsets[t] + code
                x = u[i, t]
                v = 0
                while v < vocab - 1 and x >= cdf[r, v]:
                    v += 1
                texts[i, t] = v
    return out


def linear_score(const long[:, ::1] texts, const double[::1] weights,
                 long vocab_size, long feature_order):
    cdef Py_ssize_t n = texts.shape[0], length = texts.shape[1]
    cdef Py_ssize_t i, t
    cdef double s
    cdef long base = 1 + vocab_size
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] res = out
    with nogil:
        for i in range(n):
            s = weights[0]
            for t in range(length):
                s = s + weights[1 + texts[i, t]]
            if feature_order >= 2:
                for t in range(length - 1):
                    s = s + weights[base + texts[i, t] * vocab_size + texts[i, t + 1]]
            res[i] = s
    return out


def featurize_batch(const long[:, ::1] texts, long vocab_size, long feature_order):
    cdef Py_ssize_t n = texts.shape[0], length = texts.shape[1]
    cdef Py_ssize_t i, t
    cdef long base = 1 + vocab_size
    cdef Py_ssize_t dim = base + (vocab_size * vocab_size if feature_order >= 2 else 0)
    out = np.zeros((n, dim), dtype=np.float64)
    cdef double[:, ::1] phi = out
    with nogil:
        for i in range(n):
            phi[i, 0] = 1.0
            for t in range(length):
                phi[i, 1 + texts[i, t]] += 1.0
            if feature_order >= 2:
                for t in range(length - 1):
                    phi[i, base + texts[i, t] * vocab_size + texts[i, t + 1]] += 1.0
    return out
