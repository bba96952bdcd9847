"""Pure-Python fallback for the compiled pair-distance sums.

Distances are formed coordinate by coordinate in the same order as the
compiled kernel and summed with ``math.fsum`` (exact, correctly rounded), so
both backends return identical floats.
"""
import itertools
import math

import numpy as np

_CHUNK = 1 << 20


def _row_distances(a, b, i0, i1):
    diff = a[i0:i1, None, 0] - b[None, :, 0]
    s = diff * diff
    for k in range(1, a.shape[1]):
        diff = a[i0:i1, None, k] - b[None, :, k]
        s = s + diff * diff
    return np.sqrt(s)


def _blocks(n, m):
    rows = max(1, _CHUNK // max(m, 1))
    for i0 in range(0, n, rows):
        yield i0, min(n, i0 + rows)


def cross_distance_sum(a, b):
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.shape[1] != b.shape[1]:
        raise ValueError("dimension mismatch")
    if a.shape[1] == 0:
        return 0.0
    chunks = (_row_distances(a, b, i0, i1).ravel().tolist()
              for i0, i1 in _blocks(a.shape[0], b.shape[0]))
    return math.fsum(itertools.chain.from_iterable(chunks))


def self_distance_sum(a):
    a = np.ascontiguousarray(a, dtype=np.float64)
    n = a.shape[0]
    if n < 2 or a.shape[1] == 0:
        return 0.0

    def chunks():
        for i0, i1 in _blocks(n, n):
            dist = _row_distances(a, a, i0, i1)
            rows, cols = np.nonzero(np.arange(i0, i1)[:, None] < np.arange(n)[None, :])
            yield dist[rows, cols].tolist()

    return math.fsum(itertools.chain.from_iterable(chunks()))
