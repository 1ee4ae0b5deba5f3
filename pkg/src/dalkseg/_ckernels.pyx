# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled per-column kernels. Must stay arithmetically identical to
``_pykernels`` (same accumulation order, same tie-breaks)."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def decode_transitions(const double[:, :, ::1] cost):
    """Constrained MAP transitions for an (H, W, 3) cost grid.

    Returns int64 arrays (r1, r2) with 0 <= r1 <= r2 <= H: rows [0, r1) are
    class 0, [r1, r2) class 1, [r2, H) class 2. Ties go to the smallest r1,
    then the smallest r2.
    """
    cdef Py_ssize_t H = cost.shape[0], W = cost.shape[1]
    cdef Py_ssize_t c, r, best_r1, best_r2
    cdef double s0, s1, s2, b, best_total, total
    cdef cnp.ndarray[cnp.int64_t, ndim=1] r1_out = np.empty(W, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] r2_out = np.empty(W, dtype=np.int64)
    cdef double[::1] A = np.empty(H + 1)
    cdef double[::1] sufval = np.empty(H + 1)
    cdef Py_ssize_t[::1] sufidx = np.empty(H + 1, dtype=np.intp)
    cdef double[::1] Bv = np.empty(H + 1)

    if cost.shape[2] != 3:
        raise ValueError("decode_transitions expects exactly 3 classes")

    with nogil:
        for c in range(W):
            s0 = 0.0
            s1 = 0.0
            s2 = 0.0
            A[0] = s0 - s1
            Bv[0] = s1 - s2
            for r in range(H):
                s0 = s0 + cost[r, c, 0]
                s1 = s1 + cost[r, c, 1]
                s2 = s2 + cost[r, c, 2]
                A[r + 1] = s0 - s1
                Bv[r + 1] = s1 - s2
            sufval[H] = Bv[H]
            sufidx[H] = H
            for r in range(H - 1, -1, -1):
                b = Bv[r]
                if b <= sufval[r + 1]:
                    sufval[r] = b
                    sufidx[r] = r
                else:
                    sufval[r] = sufval[r + 1]
                    sufidx[r] = sufidx[r + 1]
            best_r1 = 0
            best_total = A[0] + sufval[0]
            for r in range(1, H + 1):
                total = A[r] + sufval[r]
                if total < best_total:
                    best_total = total
                    best_r1 = r
            best_r2 = sufidx[best_r1]
            r1_out[c] = best_r1
            r2_out[c] = best_r2
    return r1_out, r2_out


def band_confidence(const double[:, :, ::1] probs, const unsigned char[:, ::1] labels,
                    const cnp.int64_t[::1] r1, const cnp.int64_t[::1] r2, Py_ssize_t radius):
    """(sum, count) of decoded-label probability within +-radius rows of
    either interface, over columns that have a cornea band."""
    cdef Py_ssize_t H = probs.shape[0], W = probs.shape[1]
    cdef Py_ssize_t c, r, lo1, hi1, lo2, hi2
    cdef double total = 0.0
    cdef Py_ssize_t count = 0
    with nogil:
        for c in range(W):
            if r1[c] >= r2[c]:
                continue
            lo1 = r1[c] - radius
            hi1 = r1[c] + radius
            lo2 = r2[c] - 1 - radius
            hi2 = r2[c] - 1 + radius
            if lo1 < 0:
                lo1 = 0
            if lo2 < 0:
                lo2 = 0
            if hi1 > H - 1:
                hi1 = H - 1
            if hi2 > H - 1:
                hi2 = H - 1
            for r in range(H):
                if (lo1 <= r <= hi1) or (lo2 <= r <= hi2):
                    total = total + probs[r, c, labels[r, c]]
                    count = count + 1
    return total, count
