# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: Hungarian assignment and residual coordinate descent.

Mirrors ``_fallback`` step for step.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, sqrt, INFINITY, isfinite
from libc.stdlib cimport malloc, free, qsort

cnp.import_array()


def linear_assignment(cost):
    cdef const double[:, ::1] c = np.ascontiguousarray(cost, dtype=np.float64)
    cdef Py_ssize_t n = c.shape[0], m = c.shape[1]
    if n > m:
        raise ValueError(f"need rows <= cols, got {n}x{m}")
    cdef double[::1] u = np.zeros(n + 1)
    cdef double[::1] v = np.zeros(m + 1)
    cdef double[::1] minv = np.empty(m + 1)
    cdef Py_ssize_t[::1] p = np.zeros(m + 1, dtype=np.intp)
    cdef Py_ssize_t[::1] way = np.zeros(m + 1, dtype=np.intp)
    cdef char[::1] used = np.zeros(m + 1, dtype=np.int8)
    cdef Py_ssize_t i, j, i0, j0, j1
    cdef double delta, cur, ui0
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        for j in range(m + 1):
            minv[j] = INFINITY
            used[j] = 0
        while True:
            used[j0] = 1
            i0 = p[j0]
            ui0 = u[i0]
            delta = INFINITY
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = c[i0 - 1, j - 1] - ui0 - v[j]
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
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    out = np.empty(n, dtype=np.intp)
    cdef Py_ssize_t[::1] col_of_row = out
    for j in range(1, m + 1):
        if p[j]:
            col_of_row[p[j] - 1] = j - 1
    return out


cdef int _cmp_double(const void *a, const void *b) noexcept nogil:
    cdef double x = (<double *> a)[0]
    cdef double y = (<double *> b)[0]
    if x < y:
        return -1
    if x > y:
        return 1
    return 0


cdef inline void _eval(double *a, double *c, Py_ssize_t n, double g_other,
                       double t, double *g, double *h) noexcept nogil:
    cdef double s = 0.0, hm = -INFINITY, dv
    cdef Py_ssize_t i
    for i in range(n):
        dv = fabs(a[i] - t)
        s += dv
        if c[i] + dv > hm:
            hm = c[i] + dv
    g[0] = s if s > g_other else g_other
    h[0] = hm


cdef double _best_coordinate(double *a, double *c, Py_ssize_t n, double g_other,
                             double *cand, double *srt, double *gv, double *hv,
                             double *best_t) noexcept nogil:
    cdef Py_ssize_t i, k, nc = 0, nu, m
    cdef double t, total = 0.0, prefix = 0.0, slope, intercept
    for i in range(n):
        cand[nc] = a[i]
        nc += 1
    for i in range(n):
        for k in range(n):
            cand[nc] = 0.5 * ((c[i] + a[i]) - (c[k] - a[k]))
            nc += 1
    for i in range(n):
        srt[i] = a[i]
    qsort(srt, n, sizeof(double), _cmp_double)
    for i in range(n):
        total += srt[i]
    t = (total - g_other) / n
    if t <= srt[0]:
        cand[nc] = t
        nc += 1
    t = (total + g_other) / n
    if t >= srt[n - 1]:
        cand[nc] = t
        nc += 1
    for m in range(n - 1):
        prefix += srt[m]
        slope = 2 * (m + 1) - n
        intercept = (total - prefix) - prefix
        if slope != 0:
            t = (g_other - intercept) / slope
            if srt[m] <= t <= srt[m + 1]:
                cand[nc] = t
                nc += 1
    qsort(cand, nc, sizeof(double), _cmp_double)
    nu = 0
    for i in range(nc):
        if not isfinite(cand[i]):
            continue
        if nu == 0 or cand[i] != cand[nu - 1]:
            cand[nu] = cand[i]
            nu += 1
    for i in range(nu):
        _eval(a, c, n, g_other, cand[i], &gv[i], &hv[i])
    cdef double best = INFINITY, val, width, gs, hs, curv, tau, gt, ht
    cdef Py_ssize_t arg = 0
    for i in range(nu):
        val = gv[i] * hv[i]
        if val < best:
            best = val
            arg = i
    best_t[0] = cand[arg]
    for i in range(nu - 1):
        width = cand[i + 1] - cand[i]
        gs = (gv[i + 1] - gv[i]) / width
        hs = (hv[i + 1] - hv[i]) / width
        curv = gs * hs
        if curv > 0:
            tau = -(gs * hv[i] + hs * gv[i]) / (2.0 * curv)
            if tau > 0 and tau < width:
                t = cand[i] + tau
                _eval(a, c, n, g_other, t, &gt, &ht)
                val = gt * ht
                if val < best:
                    best = val
                    best_t[0] = t
    return best


def min_composite_residual(X, x0, double tol=1e-9, Py_ssize_t max_sweeps=200):
    cdef const double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    x_out = np.array(x0, dtype=np.float64)
    cdef double[::1] x = x_out
    cdef Py_ssize_t n = Xv.shape[0], d = Xv.shape[1]
    cdef Py_ssize_t i, j, k, sweep
    cdef Py_ssize_t cap = n * n + 3 * n + 4
    cdef double *dev = <double *> malloc(n * d * sizeof(double))
    cdef double *colsum = <double *> malloc(d * sizeof(double))
    cdef double *rowsum = <double *> malloc(n * sizeof(double))
    cdef double *a = <double *> malloc(n * sizeof(double))
    cdef double *c = <double *> malloc(n * sizeof(double))
    cdef double *cand = <double *> malloc(cap * sizeof(double))
    cdef double *srt = <double *> malloc(n * sizeof(double))
    cdef double *gv = <double *> malloc(cap * sizeof(double))
    cdef double *hv = <double *> malloc(cap * sizeof(double))
    cdef double prev, best = INFINITY, g_other, cur, val, t, gmax, hmax, s
    try:
        for sweep in range(max_sweeps):
            for j in range(d):
                colsum[j] = 0.0
            for i in range(n):
                for j in range(d):
                    dev[i * d + j] = fabs(Xv[i, j] - x[j])
                    colsum[j] += dev[i * d + j]
            gmax = 0.0
            for j in range(d):
                if colsum[j] > gmax:
                    gmax = colsum[j]
            hmax = 0.0
            for i in range(n):
                s = 0.0
                for j in range(d):
                    s += dev[i * d + j]
                if s > hmax:
                    hmax = s
            prev = sqrt(gmax * hmax)
            if prev == 0.0:
                return 0.0, x_out
            for j in range(d):
                hmax = 0.0
                for i in range(n):
                    s = 0.0
                    for k in range(d):
                        s += dev[i * d + k]
                    rowsum[i] = s
                    if s > hmax:
                        hmax = s
                    a[i] = Xv[i, j]
                    c[i] = s - dev[i * d + j]
                g_other = 0.0
                for k in range(d):
                    if k != j and colsum[k] > g_other:
                        g_other = colsum[k]
                cur = (colsum[j] if colsum[j] > g_other else g_other) * hmax
                val = _best_coordinate(a, c, n, g_other, cand, srt, gv, hv, &t)
                if val < cur:
                    x[j] = t
                    colsum[j] = 0.0
                    for i in range(n):
                        dev[i * d + j] = fabs(a[i] - t)
                        colsum[j] += dev[i * d + j]
            gmax = 0.0
            for j in range(d):
                if colsum[j] > gmax:
                    gmax = colsum[j]
            hmax = 0.0
            for i in range(n):
                s = 0.0
                for j in range(d):
                    s += dev[i * d + j]
                if s > hmax:
                    hmax = s
            best = sqrt(gmax * hmax)
            if prev - best <= tol * prev:
                break
        return best, x_out
    finally:
        free(dev)
        free(colsum)
        free(rowsum)
        free(a)
        free(c)
        free(cand)
        free(srt)
        free(gv)
        free(hv)
