# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled pair-distance sums for the energy distance.

Sums are accumulated exactly (Shewchuk partials) and rounded once by
``math.fsum``, so results do not depend on the order of the rows and agree
bit for bit with the pure-Python fallback.
"""
import math

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, sqrt

cnp.import_array()

DEF MAX_PARTIALS = 256


cdef struct Acc:
    int n
    double p[MAX_PARTIALS]


cdef inline int _acc_add(Acc* acc, double x) nogil:
    cdef int i = 0, j
    cdef double y, hi, lo, t
    for j in range(acc.n):
        y = acc.p[j]
        if fabs(x) < fabs(y):
            t = x
            x = y
            y = t
        hi = x + y
        lo = y - (hi - x)
        if lo != 0.0:
            acc.p[i] = lo
            i += 1
        x = hi
    if i >= MAX_PARTIALS:
        return -1
    acc.p[i] = x
    acc.n = i + 1
    return 0


cdef inline double _dist(const double[:, ::1] a, Py_ssize_t i,
                         const double[:, ::1] b, Py_ssize_t j,
                         Py_ssize_t d) nogil:
    cdef double s = 0.0, diff
    cdef Py_ssize_t k
    for k in range(d):
        diff = a[i, k] - b[j, k]
        s = s + diff * diff
    return sqrt(s)


cdef object _finish(Acc* acc):
    return math.fsum([acc.p[k] for k in range(acc.n)])


def cross_distance_sum(a, b):
    """Exact sum of ||a_i - b_j|| over all pairs (i, j)."""
    cdef const double[:, ::1] av = np.ascontiguousarray(a, dtype=np.float64)
    cdef const double[:, ::1] bv = np.ascontiguousarray(b, dtype=np.float64)
    cdef Py_ssize_t n = av.shape[0], m = bv.shape[0], d = av.shape[1]
    cdef Py_ssize_t i, j
    cdef Acc acc
    cdef int status = 0
    if bv.shape[1] != d:
        raise ValueError("dimension mismatch")
    acc.n = 0
    with nogil:
        for i in range(n):
            for j in range(m):
                if _acc_add(&acc, _dist(av, i, bv, j, d)) != 0:
                    status = -1
                    break
            if status != 0:
                break
    if status != 0:
        raise OverflowError("partial-sum buffer exhausted")
    return _finish(&acc)


def self_distance_sum(a):
    """Exact sum of ||a_i - a_j|| over unordered pairs i < j."""
    cdef const double[:, ::1] av = np.ascontiguousarray(a, dtype=np.float64)
    cdef Py_ssize_t n = av.shape[0], d = av.shape[1]
    cdef Py_ssize_t i, j
    cdef Acc acc
    cdef int status = 0
    acc.n = 0
    with nogil:
        for i in range(n):
            for j in range(i + 1, n):
                if _acc_add(&acc, _dist(av, i, av, j, d)) != 0:
                    status = -1
                    break
            if status != 0:
                break
    if status != 0:
        raise OverflowError("partial-sum buffer exhausted")
    return _finish(&acc)
