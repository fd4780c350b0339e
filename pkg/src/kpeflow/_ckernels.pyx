# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
# distutils: language = c++
"""Compiled inner loops. Signatures mirror kpeflow._pykernels exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs, exp, log, INFINITY
from libcpp.algorithm cimport nth_element
from libcpp.vector cimport vector

cnp.import_array()


def jacobi_eigh(double[:, ::1] a_in, double tol=1e-15, int max_sweeps=100):
    """Cyclic Jacobi rotations. Returns unsorted (eigenvalues, eigenvectors-as-columns)."""
    cdef Py_ssize_t n = a_in.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] a_arr = np.array(a_in, dtype=np.float64, copy=True)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] v_arr = np.eye(n, dtype=np.float64)
    cdef double[:, ::1] a = a_arr
    cdef double[:, ::1] v = v_arr
    cdef Py_ssize_t p, q, k
    cdef int sweep
    cdef double off, total, apq, theta, t, c, s, x, y

    total = 0.0
    for p in range(n):
        for q in range(n):
            total += a[p, q] * a[p, q]

    for sweep in range(max_sweeps):
        off = 0.0
        for p in range(n):
            for q in range(p + 1, n):
                off += a[p, q] * a[p, q]
        if off <= tol * tol * total or off == 0.0:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if fabs(apq) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if theta >= 0:
                    t = 1.0 / (theta + sqrt(theta * theta + 1.0))
                else:
                    t = -1.0 / (-theta + sqrt(theta * theta + 1.0))
                c = 1.0 / sqrt(t * t + 1.0)
                s = t * c
                for k in range(n):
                    x = a[k, p]
                    y = a[k, q]
                    a[k, p] = c * x - s * y
                    a[k, q] = s * x + c * y
                for k in range(n):
                    x = a[p, k]
                    y = a[q, k]
                    a[p, k] = c * x - s * y
                    a[q, k] = s * x + c * y
                a[p, q] = 0.0
                a[q, p] = 0.0
                for k in range(n):
                    x = v[k, p]
                    y = v[k, q]
                    v[k, p] = c * x - s * y
                    v[k, q] = s * x + c * y

    return np.diagonal(a_arr).copy(), v_arr


def hungarian(double[:, ::1] cost):
    """Shortest-augmenting-path assignment with dual potentials, O(n^3).

    Returns ``perm`` with ``perm[row] = column``.
    """
    cdef Py_ssize_t n = cost.shape[0]
    cdef Py_ssize_t m = cost.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] u_arr = np.zeros(n + 1)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] v_arr = np.zeros(m + 1)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] minv_arr = np.empty(m + 1)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] p_arr = np.zeros(m + 1, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] way_arr = np.zeros(m + 1, dtype=np.int64)
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] used_arr = np.zeros(m + 1, dtype=np.uint8)
    cdef double[::1] u = u_arr
    cdef double[::1] v = v_arr
    cdef double[::1] minv = minv_arr
    cdef long long[::1] p = p_arr
    cdef long long[::1] way = way_arr
    cdef unsigned char[::1] used = used_arr
    cdef Py_ssize_t i, j, j0, j1, i0
    cdef double delta, cur

    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        for j in range(m + 1):
            minv[j] = INFINITY
            used[j] = 0
        while True:
            used[j0] = 1
            i0 = p[j0]
            delta = INFINITY
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1

    cdef cnp.ndarray[cnp.int64_t, ndim=1] perm = np.empty(n, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j] != 0:
            perm[p[j] - 1] = j - 1
    return perm


def knn_kth_distance(double[:, ::1] query, double[:, ::1] ref, Py_ssize_t k, bint exclude_self):
    """Distance from each query row to its k-th nearest reference row."""
    cdef Py_ssize_t nq = query.shape[0]
    cdef Py_ssize_t nr = ref.shape[0]
    cdef Py_ssize_t d = query.shape[1]
    cdef Py_ssize_t i, j, c, cnt
    cdef double s, diff
    cdef vector[double] buf
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out_arr = np.empty(nq)
    cdef double[::1] out = out_arr

    buf.resize(nr)
    for i in range(nq):
        cnt = 0
        for j in range(nr):
            if exclude_self and i == j:
                continue
            s = 0.0
            for c in range(d):
                diff = query[i, c] - ref[j, c]
                s += diff * diff
            buf[cnt] = s
            cnt += 1
        nth_element(buf.begin(), buf.begin() + (k - 1), buf.begin() + cnt)
        out[i] = sqrt(buf[k - 1])
    return out_arr


def kde_log_density(double[:, ::1] query, double[:, ::1] ref, double[::1] h, bint exclude_self):
    """Log of the product-Gaussian KDE built on ``ref`` evaluated at each query row."""
    cdef Py_ssize_t nq = query.shape[0]
    cdef Py_ssize_t nr = ref.shape[0]
    cdef Py_ssize_t d = query.shape[1]
    cdef Py_ssize_t i, j, c, cnt
    cdef double s, z, mx, acc, lognorm
    cdef vector[double] buf
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out_arr = np.empty(nq)
    cdef double[::1] out = out_arr

    lognorm = 0.0
    for c in range(d):
        lognorm += log(h[c]) + 0.5 * log(2.0 * 3.141592653589793)
    buf.resize(nr)
    for i in range(nq):
        cnt = 0
        mx = -INFINITY
        for j in range(nr):
            if exclude_self and i == j:
                continue
            s = 0.0
            for c in range(d):
                z = (query[i, c] - ref[j, c]) / h[c]
                s += z * z
            s = -0.5 * s
            buf[cnt] = s
            if s > mx:
                mx = s
            cnt += 1
        acc = 0.0
        for j in range(cnt):
            acc += exp(buf[j] - mx)
        out[i] = mx + log(acc) - log(<double> cnt) - lognorm
    return out_arr
