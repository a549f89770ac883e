# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled matching and ranking kernels. Same contracts as ``_kernels_py``."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef inline double _iou(double ax1, double ay1, double ax2, double ay2,
                        double bx1, double by1, double bx2, double by2) nogil:
    cdef double iw = min(ax2, bx2) - max(ax1, bx1)
    cdef double ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    cdef double inter = iw * ih
    return inter / ((ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter)


def iou_matrix(a, b):
    cdef double[:, ::1] A = np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 4)
    cdef double[:, ::1] B = np.ascontiguousarray(b, dtype=np.float64).reshape(-1, 4)
    cdef Py_ssize_t n = A.shape[0], m = B.shape[0], i, j
    out = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] O = out
    with nogil:
        for i in range(n):
            for j in range(m):
                O[i, j] = _iou(A[i, 0], A[i, 1], A[i, 2], A[i, 3], B[j, 0], B[j, 1], B[j, 2], B[j, 3])
    return out


def greedy_match(dets, gts, double threshold=0.5):
    cdef double[:, ::1] D = np.ascontiguousarray(dets, dtype=np.float64).reshape(-1, 4)
    cdef double[:, ::1] G = np.ascontiguousarray(gts, dtype=np.float64).reshape(-1, 4)
    cdef Py_ssize_t n = D.shape[0], m = G.shape[0], i, j, best
    cdef double v, best_v
    out = np.full(n, -1, dtype=np.int64)
    cdef long long[::1] O = out
    claimed = np.zeros(m, dtype=np.uint8)
    cdef unsigned char[::1] C = claimed
    with nogil:
        for i in range(n):
            best = -1
            best_v = threshold
            for j in range(m):
                if C[j]:
                    continue
                v = _iou(D[i, 0], D[i, 1], D[i, 2], D[i, 3], G[j, 0], G[j, 1], G[j, 2], G[j, 3])
                if v > best_v:
                    best_v = v
                    best = j
            if best >= 0:
                C[best] = 1
                O[i] = best
    return out


def average_precision(flags, Py_ssize_t n_positives):
    cdef cnp.uint8_t[::1] F = np.ascontiguousarray(flags, dtype=np.uint8)
    cdef Py_ssize_t k, hits = 0
    cdef double total = 0.0
    if n_positives <= 0:
        return 0.0
    for k in range(F.shape[0]):
        if F[k]:
            hits += 1
            total += <double>hits / <double>(k + 1)
    return total / n_positives


def interpolated_ap(flags, Py_ssize_t n_positives):
    cdef cnp.uint8_t[::1] F = np.ascontiguousarray(flags, dtype=np.uint8)
    cdef Py_ssize_t n = F.shape[0], k, hits = 0
    if n_positives <= 0:
        return 0.0
    prec = np.zeros(n, dtype=np.float64)
    rec = np.zeros(n, dtype=np.float64)
    cdef double[::1] P = prec
    cdef double[::1] R = rec
    for k in range(n):
        hits += F[k]
        P[k] = <double>hits / <double>(k + 1)
        R[k] = <double>hits / <double>n_positives
    # precision envelope, right to left
    for k in range(n - 2, -1, -1):
        if P[k] < P[k + 1]:
            P[k] = P[k + 1]
    cdef double ap = 0.0, prev_r = 0.0
    for k in range(n):
        if R[k] > prev_r:
            ap += (R[k] - prev_r) * P[k]
            prev_r = R[k]
    return ap
