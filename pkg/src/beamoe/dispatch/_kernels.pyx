# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled dispatch hot kernels: masked id routing and expert-wise grouping.

Same contracts as the numpy fallback in ``_fallback.py``; selected at import
time when the extension built.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

BACKEND_NAME = "cython"


def mask_route(topk_ids, mask_logits):
    """Replace each routed expert id by -1 when its mask logit is negative."""
    cdef cnp.ndarray[cnp.int64_t, ndim=2] ids = np.ascontiguousarray(topk_ids, dtype=np.int64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] logits = np.ascontiguousarray(mask_logits, dtype=np.float64)
    cdef Py_ssize_t t = ids.shape[0]
    cdef Py_ssize_t k = ids.shape[1]
    cdef Py_ssize_t n = logits.shape[1]
    cdef cnp.ndarray[cnp.int64_t, ndim=2] out = np.empty((t, k), dtype=np.int64)
    cdef Py_ssize_t i, j
    cdef cnp.int64_t e
    for i in range(t):
        for j in range(k):
            e = ids[i, j]
            if e < 0 or e >= n or logits[i, e] < 0.0:
                out[i, j] = -1
            else:
                out[i, j] = e
    return out


def group_by_expert(ids_in, int num_experts):
    """Group unmasked (token, slot) pairs by expert, preserving scan order."""
    cdef cnp.ndarray[cnp.int64_t, ndim=2] ids = np.ascontiguousarray(ids_in, dtype=np.int64)
    cdef Py_ssize_t t = ids.shape[0]
    cdef Py_ssize_t k = ids.shape[1]
    cdef cnp.ndarray[cnp.int64_t, ndim=1] counts = np.zeros(num_experts, dtype=np.int64)
    cdef Py_ssize_t i, j
    cdef cnp.int64_t e
    for i in range(t):
        for j in range(k):
            e = ids[i, j]
            if e >= 0:
                counts[e] += 1
    cdef cnp.int64_t total = 0
    cdef cnp.ndarray[cnp.int64_t, ndim=1] cursor = np.empty(num_experts, dtype=np.int64)
    for i in range(num_experts):
        cursor[i] = total
        total += counts[i]
    cdef cnp.ndarray[cnp.int64_t, ndim=1] token_order = np.empty(total, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] slot_order = np.empty(total, dtype=np.int64)
    cdef cnp.int64_t pos
    for i in range(t):
        for j in range(k):
            e = ids[i, j]
            if e >= 0:
                pos = cursor[e]
                token_order[pos] = i
                slot_order[pos] = j
                cursor[e] = pos + 1
    return counts, token_order, slot_order
