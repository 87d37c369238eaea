"""Hot numeric kernels.

Every kernel exists twice: a scalar-loop version that numba compiles, and a
vectorised numpy version. The module-level names (``jacobi_eigh``,
``hungarian_min``, ``nearest_centroid``, ``segment_sum``) point at whichever
backend ``partco._accel`` selected. ``BACKENDS`` exposes both for benchmarks
and cross-checks.
"""
import numpy as np

from . import _accel

# ---------------------------------------------------------------------------
# scalar-loop versions (numba targets)
# ---------------------------------------------------------------------------


def _jacobi_loops(a_in, tol, max_sweeps):
    n = a_in.shape[0]
    a = a_in.copy()
    v = np.eye(n)
    scale = 0.0
    for i in range(n):
        for j in range(n):
            scale += a[i, j] * a[i, j]
    scale = np.sqrt(scale)
    sweeps = 0
    if scale == 0.0:
        return np.zeros(n), v, sweeps
    for sweep in range(max_sweeps):
        off = 0.0
        for i in range(n - 1):
            for j in range(i + 1, n):
                off += a[i, j] * a[i, j]
        if np.sqrt(2.0 * off) <= tol * scale:
            break
        sweeps += 1
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = 1.0 / (abs(theta) + np.sqrt(theta * theta + 1.0))
                    if theta < 0.0:
                        t = -t
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                for k in range(n):
                    akp = a[k, p]
                    akq = a[k, q]
                    a[k, p] = c * akp - s * akq
                    a[k, q] = s * akp + c * akq
                for k in range(n):
                    apk = a[p, k]
                    aqk = a[q, k]
                    a[p, k] = c * apk - s * aqk
                    a[q, k] = s * apk + c * aqk
                a[p, q] = 0.0
                a[q, p] = 0.0
                for k in range(n):
                    vkp = v[k, p]
                    vkq = v[k, q]
                    v[k, p] = c * vkp - s * vkq
                    v[k, q] = s * vkp + c * vkq
    w = np.empty(n)
    for i in range(n):
        w[i] = a[i, i]
    return w, v, sweeps


def _hungarian_loops(cost):
    # shortest augmenting path, rows <= cols, 1-based potentials
    n, m = cost.shape
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, inf)
        used = np.zeros(m + 1, dtype=np.bool_)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = inf
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
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    row_to_col = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j] != 0:
            row_to_col[p[j] - 1] = j - 1
    return row_to_col


def _nearest_loops(x, c):
    n, d = x.shape
    k = c.shape[0]
    idx = np.zeros(n, dtype=np.int64)
    dist = np.zeros(n)
    for i in range(n):
        best = np.inf
        arg = 0
        for j in range(k):
            acc = 0.0
            for t in range(d):
                diff = x[i, t] - c[j, t]
                acc += diff * diff
            if acc < best:
                best = acc
                arg = j
        idx[i] = arg
        dist[i] = best
    return idx, dist


def _segment_sum_loops(x, seg, nseg):
    n, d = x.shape
    out = np.zeros((nseg, d))
    counts = np.zeros(nseg, dtype=np.int64)
    for i in range(n):
        s = seg[i]
        if s < 0:
            continue
        counts[s] += 1
        for t in range(d):
            out[s, t] += x[i, t]
    return out, counts


# ---------------------------------------------------------------------------
# numpy versions
# ---------------------------------------------------------------------------


def _jacobi_numpy(a_in, tol, max_sweeps):
    n = a_in.shape[0]
    a = np.array(a_in, dtype=np.float64, copy=True)
    v = np.eye(n)
    scale = np.sqrt(np.sum(a * a))
    if scale == 0.0:
        return np.zeros(n), v, 0
    iu = np.triu_indices(n, 1)
    sweeps = 0
    for _ in range(max_sweeps):
        if np.sqrt(2.0 * np.sum(a[iu] ** 2)) <= tol * scale:
            break
        sweeps += 1
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = 1.0 / (abs(theta) + np.sqrt(theta * theta + 1.0))
                    if theta < 0.0:
                        t = -t
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                colp = a[:, p].copy()
                colq = a[:, q]
                a[:, p] = c * colp - s * colq
                a[:, q] = s * colp + c * colq
                rowp = a[p, :].copy()
                rowq = a[q, :]
                a[p, :] = c * rowp - s * rowq
                a[q, :] = s * rowp + c * rowq
                a[p, q] = 0.0
                a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q]
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    return np.diag(a).copy(), v, sweeps


def _hungarian_numpy(cost):
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
            free = ~used
            free[0] = False
            cur = np.full(m + 1, np.inf)
            cur[1:] = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            masked = np.where(free, minv, np.inf)
            j1 = int(np.argmin(masked))
            delta = masked[j1]
            np.add.at(u, p[used], delta)
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    row_to_col = np.full(n, -1, dtype=np.int64)
    cols = np.nonzero(p[1:])[0]
    row_to_col[p[1:][cols] - 1] = cols
    return row_to_col


def _nearest_numpy(x, c, chunk=4096):
    n = x.shape[0]
    idx = np.empty(n, dtype=np.int64)
    dist = np.empty(n)
    for start in range(0, n, chunk):
        block = x[start:start + chunk]
        d2 = ((block[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)
        arg = np.argmin(d2, axis=1)
        idx[start:start + chunk] = arg
        dist[start:start + chunk] = d2[np.arange(block.shape[0]), arg]
    return idx, dist


def _segment_sum_numpy(x, seg, nseg):
    keep = seg >= 0
    out = np.zeros((nseg, x.shape[1]))
    np.add.at(out, seg[keep], x[keep])
    counts = np.bincount(seg[keep], minlength=nseg).astype(np.int64)
    return out, counts


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

BACKENDS = {
    "numpy": {
        "jacobi_eigh": _jacobi_numpy,
        "hungarian_min": _hungarian_numpy,
        "nearest_centroid": _nearest_numpy,
        "segment_sum": _segment_sum_numpy,
    }
}

if _accel._numba is not None:
    _nb = _accel._numba.njit(cache=True, nogil=True)
    BACKENDS["numba"] = {
        "jacobi_eigh": _nb(_jacobi_loops),
        "hungarian_min": _nb(_hungarian_loops),
        "nearest_centroid": _nb(_nearest_loops),
        "segment_sum": _nb(_segment_sum_loops),
    }

_active = BACKENDS["numba" if _accel.USE_NUMBA else "numpy"]


def jacobi_eigh(a, tol=1e-14, max_sweeps=100):
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Returns ``(eigenvalues, eigenvectors_as_columns, sweeps)``, unsorted.
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    return _active["jacobi_eigh"](a, float(tol), int(max_sweeps))


def hungarian_min(cost):
    """Minimum-cost assignment for ``rows <= cols``; returns the column per row."""
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    return _active["hungarian_min"](cost)


def nearest_centroid(x, c):
    """Index of and squared distance to the nearest row of ``c``; ties go low."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    c = np.ascontiguousarray(c, dtype=np.float64)
    return _active["nearest_centroid"](x, c)


def segment_sum(x, seg, nseg):
    """Per-segment row sums and counts; negative segment ids are skipped."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    seg = np.ascontiguousarray(seg, dtype=np.int64)
    return _active["segment_sum"](x, seg, int(nseg))
