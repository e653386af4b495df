# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: cyclic-by-row Jacobi and brute-force k-th neighbour distance."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs
from libcpp.vector cimport vector
from libcpp.algorithm cimport nth_element

cnp.import_array()


cdef double _offdiag_norm(double[:, ::1] a, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef double s = 0.0
    for i in range(n):
        for j in range(n):
            if i != j:
                s += a[i, j] * a[i, j]
    return sqrt(s)


def jacobi_eigh(double[:, ::1] m, double rel_tol, int max_sweeps):
    """Unsorted eigenpairs of a symmetric matrix.

    Returns ``(diag, vectors, sweeps)``; columns of ``vectors`` are eigenvectors.
    """
    cdef Py_ssize_t n = m.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] a_arr = np.array(m, dtype=np.float64, order="C")
    cdef cnp.ndarray[cnp.float64_t, ndim=2] v_arr = np.eye(n, dtype=np.float64)
    cdef double[:, ::1] a = a_arr
    cdef double[:, ::1] v = v_arr
    cdef Py_ssize_t p, q, k
    cdef int sweep = 0
    cdef double apq, theta, t, c, s, akp, akq, fro = 0.0, tol

    for p in range(n):
        for q in range(n):
            fro += a[p, q] * a[p, q]
    tol = rel_tol * sqrt(fro)

    with nogil:
        while sweep < max_sweeps:
            if _offdiag_norm(a, n) <= tol:
                break
            for p in range(n - 1):
                for q in range(p + 1, n):
                    apq = a[p, q]
                    if apq == 0.0:
                        continue
                    theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                    if theta >= 0.0:
                        t = 1.0 / (theta + sqrt(theta * theta + 1.0))
                    else:
                        t = -1.0 / (-theta + sqrt(theta * theta + 1.0))
                    c = 1.0 / sqrt(t * t + 1.0)
                    s = t * c
                    for k in range(n):
                        akp = a[k, p]
                        akq = a[k, q]
                        a[k, p] = c * akp - s * akq
                        a[k, q] = s * akp + c * akq
                    for k in range(n):
                        akp = a[p, k]
                        akq = a[q, k]
                        a[p, k] = c * akp - s * akq
                        a[q, k] = s * akp + c * akq
                    a[p, q] = 0.0
                    a[q, p] = 0.0
                    for k in range(n):
                        akp = v[k, p]
                        akq = v[k, q]
                        v[k, p] = c * akp - s * akq
                        v[k, q] = s * akp + c * akq
            sweep += 1

    return np.diagonal(a_arr).copy(), v_arr, sweep


def knn_kth_distance(double[:, ::1] store, double[:, ::1] queries, Py_ssize_t k):
    """Euclidean distance from each query row to its k-th nearest stored row (1-based k)."""
    cdef Py_ssize_t n = store.shape[0]
    cdef Py_ssize_t m = queries.shape[0]
    cdef Py_ssize_t d = store.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out_arr = np.empty(m, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef vector[double] buf
    cdef Py_ssize_t i, j, f
    cdef double acc, diff
    buf.resize(n)
    with nogil:
        for i in range(m):
            for j in range(n):
                acc = 0.0
                for f in range(d):
                    diff = queries[i, f] - store[j, f]
                    acc = acc + diff * diff
                buf[j] = acc
            nth_element(buf.begin(), buf.begin() + (k - 1), buf.end())
            out[i] = sqrt(buf[k - 1])
    return out_arr
