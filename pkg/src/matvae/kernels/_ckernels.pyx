# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels; see matvae.kernels._fallback for the reference versions."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


def neighbor_counts(const signed char[:, ::1] encoded, double theta):
    cdef Py_ssize_t n = encoded.shape[0]
    cdef Py_ssize_t length = encoded.shape[1]
    cdef Py_ssize_t i, j, k
    cdef long mism
    cdef double dl = <double>length
    counts_arr = np.ones(n, dtype=np.int64)
    cdef cnp.int64_t[::1] counts = counts_arr
    with nogil:
        for i in range(n):
            for j in range(i + 1, n):
                mism = 0
                for k in range(length):
                    if encoded[i, k] != encoded[j, k]:
                        mism += 1
                if mism / dl < theta:
                    counts[i] += 1
                    counts[j] += 1
    return counts_arr


def pairwise_distances(coords):
    cdef double[:, ::1] c = np.ascontiguousarray(coords, dtype=np.float64)
    cdef Py_ssize_t n = c.shape[0]
    cdef Py_ssize_t dim = c.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double acc, t
    out_arr = np.zeros((n, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    with nogil:
        for i in range(n):
            for j in range(i + 1, n):
                acc = 0.0
                for k in range(dim):
                    t = c[i, k] - c[j, k]
                    acc = acc + t * t
                out[i, j] = sqrt(acc)
                out[j, i] = out[i, j]
    return out_arr
