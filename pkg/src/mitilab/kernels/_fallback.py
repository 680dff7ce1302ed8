"""Pure-Python/numpy versions of the hot kernels.

Used when the compiled ``_core`` extension is unavailable or when
``MITILAB_PURE_PYTHON=1`` is set. Both implementations follow the same
algorithm step for step, so assignments agree exactly and residual minima
agree up to summation order.
"""

from __future__ import annotations

import math

import numpy as np


def linear_assignment(cost):
    """Shortest-augmenting-path Hungarian method for ``rows <= cols``.

    Returns an int array ``col_of_row``. Ties are broken towards the lowest
    column index because only strict improvements replace a candidate.
    """
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n > m:
        raise ValueError(f"need rows <= cols, got {n}x{m}")
    c = cost.tolist()
    inf = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    p = [0] * (m + 1)
    way = [0] * (m + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            row = c[i0 - 1]
            ui0 = u[i0]
            delta = inf
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = row[j - 1] - ui0 - v[j]
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
    col_of_row = np.empty(n, dtype=np.intp)
    for j in range(1, m + 1):
        if p[j]:
            col_of_row[p[j] - 1] = j - 1
    return col_of_row


def _coordinate_candidates(a, c, g_other):
    """Every kink of g(t) and h(t) for one coordinate, sorted and unique."""
    n = a.shape[0]
    # h(t) = max_i c_i + |a_i - t|: falling branch of i meets rising branch of k
    cross = 0.5 * ((c + a)[:, None] - (c - a)[None, :])
    parts = [a, cross.ravel()]
    # g(t) = max(g_other, sum_i |a_i - t|): solve the sum == g_other per segment
    s = np.sort(a)
    total = s.sum()
    prefix = np.concatenate(([0.0], np.cumsum(s)))
    g_cross = []
    # t below all points: slope -n
    t = (total - g_other) / n
    if t <= s[0]:
        g_cross.append(t)
    t = (total + g_other) / n
    if t >= s[-1]:
        g_cross.append(t)
    for m in range(n - 1):
        slope = 2 * (m + 1) - n
        intercept = (total - prefix[m + 1]) - prefix[m + 1]
        if slope != 0:
            t = (g_other - intercept) / slope
            if s[m] <= t <= s[m + 1]:
                g_cross.append(t)
    if g_cross:
        parts.append(np.asarray(g_cross))
    cand = np.unique(np.concatenate(parts))
    return cand[np.isfinite(cand)]


def _eval_coordinate(a, c, g_other, t):
    dev = np.abs(a[:, None] - t[None, :])
    g = np.maximum(dev.sum(axis=0), g_other)
    h = (c[:, None] + dev).max(axis=0)
    return g, h


def _best_coordinate(a, c, g_other):
    cand = _coordinate_candidates(a, c, g_other)
    g, h = _eval_coordinate(a, c, g_other, cand)
    if cand.shape[0] > 1:
        # between kinks g and h are affine, so g*h is a parabola per interval
        width = np.diff(cand)
        gs = np.diff(g) / width
        hs = np.diff(h) / width
        curv = gs * hs
        ok = curv > 0
        if np.any(ok):
            tau = -(gs[ok] * h[:-1][ok] + hs[ok] * g[:-1][ok]) / (2.0 * curv[ok])
            inside = (tau > 0) & (tau < width[ok])
            if np.any(inside):
                tv = cand[:-1][ok][inside] + tau[inside]
                gv, hv = _eval_coordinate(a, c, g_other, tv)
                cand = np.concatenate((cand, tv))
                g = np.concatenate((g, gv))
                h = np.concatenate((h, hv))
    prod = g * h
    k = int(np.argmin(prod))
    return cand[k], prod[k]


def min_composite_residual(X, x0, tol=1e-9, max_sweeps=200):
    """Coordinate descent on sqrt(||X - 1x^T||_1 * ||X - 1x^T||_inf) from ``x0``.

    Every coordinate step is an exact one-dimensional minimisation. Returns
    ``(value, x)``.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    x = np.array(x0, dtype=np.float64)
    n, d = X.shape
    best = math.inf
    for _ in range(max_sweeps):
        dev = np.abs(X - x[None, :])
        colsum = dev.sum(axis=0)
        prev = math.sqrt(colsum.max() * dev.sum(axis=1).max())
        if prev == 0.0:
            return 0.0, x
        for j in range(d):
            a = X[:, j]
            rowsum = dev.sum(axis=1)
            c = rowsum - dev[:, j]
            g_other = np.delete(colsum, j).max() if d > 1 else 0.0
            cur = max(colsum[j], g_other) * rowsum.max()
            t, val = _best_coordinate(a, c, g_other)
            if val < cur:
                x[j] = t
                dev[:, j] = np.abs(a - t)
                colsum[j] = dev[:, j].sum()
        best = math.sqrt(colsum.max() * dev.sum(axis=1).max())
        if prev - best <= tol * prev:
            break
    return best, x
