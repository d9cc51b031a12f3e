# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled CTC forward-backward in log space (blank = 0)."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log1p, INFINITY

cnp.import_array()


cdef inline double _lse(double a, double b) nogil:
    if a == -INFINITY:
        return b
    if b == -INFINITY:
        return a
    if a > b:
        return a + log1p(exp(b - a))
    return b + log1p(exp(a - b))


def forward_backward(cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] log_probs,
                     cnp.ndarray[cnp.int64_t, ndim=1] labels):
    cdef Py_ssize_t T = log_probs.shape[0]
    cdef Py_ssize_t C = log_probs.shape[1]
    cdef Py_ssize_t L = labels.shape[0]
    cdef Py_ssize_t S = 2 * L + 1
    cdef Py_ssize_t t, s
    cdef double acc, log_p

    cdef cnp.ndarray[cnp.int64_t, ndim=1] ext = np.zeros(S, dtype=np.int64)
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] skip = np.zeros(S, dtype=np.uint8)
    for s in range(L):
        ext[2 * s + 1] = labels[s]
    for s in range(3, S, 2):
        skip[s] = ext[s] != ext[s - 2]

    cdef cnp.ndarray[cnp.float64_t, ndim=2] alpha = np.full((T, S), -np.inf)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] beta = np.full((T, S), -np.inf)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] grad = np.zeros((T, C))

    with nogil:
        alpha[0, 0] = log_probs[0, 0]
        if S > 1:
            alpha[0, 1] = log_probs[0, ext[1]]
        for t in range(1, T):
            for s in range(S):
                acc = alpha[t - 1, s]
                if s >= 1:
                    acc = _lse(acc, alpha[t - 1, s - 1])
                if s >= 2 and skip[s]:
                    acc = _lse(acc, alpha[t - 1, s - 2])
                if acc != -INFINITY:
                    alpha[t, s] = acc + log_probs[t, ext[s]]

        beta[T - 1, S - 1] = log_probs[T - 1, ext[S - 1]]
        if S > 1:
            beta[T - 1, S - 2] = log_probs[T - 1, ext[S - 2]]
        for t in range(T - 2, -1, -1):
            for s in range(S):
                acc = beta[t + 1, s]
                if s + 1 < S:
                    acc = _lse(acc, beta[t + 1, s + 1])
                if s + 2 < S and skip[s + 2]:
                    acc = _lse(acc, beta[t + 1, s + 2])
                if acc != -INFINITY:
                    beta[t, s] = acc + log_probs[t, ext[s]]

        if S > 1:
            log_p = _lse(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
        else:
            log_p = alpha[T - 1, 0]
        for t in range(T):
            for s in range(S):
                acc = alpha[t, s] + beta[t, s]
                if acc != -INFINITY:
                    grad[t, ext[s]] -= exp(acc - log_probs[t, ext[s]] - log_p)
    return -log_p, grad
