"""Pure-Python (numpy) versions of the compiled kernels.

Same algorithms, same signatures, same arithmetic order where it matters for
bitwise agreement (Jacobi rotations, assignment duals). Used when the
extension is not built or ``KPEFLOW_PURE_PYTHON=1``.
"""

import math

import numpy as np

_CHUNK = 256


def jacobi_eigh(a_in, tol=1e-15, max_sweeps=100):
    a = np.array(a_in, dtype=np.float64, copy=True)
    n = a.shape[0]
    v = np.eye(n)
    total = float(np.sum(a * a))
    iu = np.triu_indices(n, 1)
    for _ in range(max_sweeps):
        off = float(np.sum(a[iu] ** 2))
        if off <= tol * tol * total or off == 0.0:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if theta >= 0:
                    t = 1.0 / (theta + math.sqrt(theta * theta + 1.0))
                else:
                    t = -1.0 / (-theta + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                x = a[:, p].copy()
                y = a[:, q].copy()
                a[:, p] = c * x - s * y
                a[:, q] = s * x + c * y
                x = a[p, :].copy()
                y = a[q, :].copy()
                a[p, :] = c * x - s * y
                a[q, :] = s * x + c * y
                a[p, q] = 0.0
                a[q, p] = 0.0
                x = v[:, p].copy()
                y = v[:, q].copy()
                v[:, p] = c * x - s * y
                v[:, q] = s * x + c * y
    return np.diagonal(a).copy(), v


def hungarian(cost):
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    perm = np.empty(n, dtype=np.int64)
    cols = np.nonzero(p[1:])[0] + 1
    perm[p[cols] - 1] = cols - 1
    return perm


def _sq_dists(q, ref):
    diff = q[:, None, :] - ref[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def knn_kth_distance(query, ref, k, exclude_self):
    query = np.asarray(query, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    out = np.empty(len(query))
    for start in range(0, len(query), _CHUNK):
        stop = min(start + _CHUNK, len(query))
        d2 = _sq_dists(query[start:stop], ref)
        if exclude_self:
            rows = np.arange(stop - start)
            d2[rows, rows + start] = np.inf
        out[start:stop] = np.sqrt(np.partition(d2, k - 1, axis=1)[:, k - 1])
    return out


def kde_log_density(query, ref, h, exclude_self):
    query = np.asarray(query, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    d = query.shape[1]
    lognorm = float(np.sum(np.log(h))) + d * 0.5 * math.log(2.0 * math.pi)
    count = len(ref) - 1 if exclude_self else len(ref)
    out = np.empty(len(query))
    for start in range(0, len(query), _CHUNK):
        stop = min(start + _CHUNK, len(query))
        e = -0.5 * _sq_dists(query[start:stop] / h, ref / h)
        if exclude_self:
            rows = np.arange(stop - start)
            e[rows, rows + start] = -np.inf
        mx = e.max(axis=1)
        out[start:stop] = mx + np.log(np.exp(e - mx[:, None]).sum(axis=1))
    return out - math.log(count) - lognorm
