"""Dense linear algebra, clustering and assignment primitives."""
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import DimensionError, ValidationError

EIG_RTOL = 1e-12


@dataclass(frozen=True)
class PCAResult:
    components: np.ndarray  # d x q, orthonormal columns
    eigenvalues: np.ndarray  # q, nonincreasing
    mean: np.ndarray  # d, zeros when uncentered
    rank_deficient: bool = False
    n_valid: int = 0  # columns backed by a nonzero eigenvalue


@dataclass(frozen=True)
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    n_iter: int = 0
    inertia_history: tuple = field(default=(), repr=False)


@dataclass(frozen=True)
class Assignment:
    permutation: np.ndarray  # row i -> column permutation[i]
    total_profit: float


def _as_matrix(x, name="X"):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValidationError(f"{name} contains non-finite values")
    return x


def _orient(columns):
    # largest-magnitude entry of each column made positive
    idx = np.argmax(np.abs(columns), axis=0)
    signs = np.sign(columns[idx, np.arange(columns.shape[1])])
    signs[signs == 0] = 1.0
    return columns * signs


def _complete_basis(basis, d, q):
    """Extend orthonormal columns ``basis`` to ``q`` columns by Gram-Schmidt on e_i."""
    cols = [basis[:, j] for j in range(basis.shape[1])]
    for i in range(d):
        if len(cols) == q:
            break
        e = np.zeros(d)
        e[i] = 1.0
        for _ in range(2):
            for c in cols:
                e -= (c @ e) * c
        norm = np.linalg.norm(e)
        if norm > 1e-8:
            cols.append(e / norm)
    return np.column_stack(cols) if cols else np.zeros((d, 0))


def pca_top_components(X, q, centered=False):
    """Top-``q`` principal directions of ``X`` via a Jacobi eigensolve.

    Uncentered mode diagonalises ``X.T @ X / n``; centered mode the covariance.
    Whichever of the d x d or n x n Gram matrices is smaller is decomposed.
    Directions with eigenvalue below ``EIG_RTOL * max_eigenvalue`` are reported
    with eigenvalue 0 and ``rank_deficient=True``.
    """
    X = _as_matrix(X)
    n, d = X.shape
    if n < 2:
        raise ValidationError("PCA needs at least 2 rows")
    if q < 1 or q > d:
        raise DimensionError(f"q={q} must lie in [1, {d}]")
    mean = X.mean(axis=0) if centered else np.zeros(d)
    Xc = X - mean if centered else X

    if d <= n:
        w, V, _ = kernels.jacobi_eigh(Xc.T @ Xc / n)
        order = np.argsort(-w, kind="stable")
        w = np.clip(w[order], 0.0, None)
        V = V[:, order]
    else:
        w, U, _ = kernels.jacobi_eigh(Xc @ Xc.T / n)
        order = np.argsort(-w, kind="stable")
        w = np.clip(w[order], 0.0, None)
        U = U[:, order]
        V = np.zeros((d, 0))

    wmax = w[0] if w.size else 0.0
    valid = w > EIG_RTOL * wmax if wmax > 0 else np.zeros_like(w, dtype=bool)
    n_valid = int(min(np.count_nonzero(valid), q))

    if d <= n:
        comps = V[:, :q].copy()
    else:
        lifted = Xc.T @ U[:, :n_valid]
        lifted /= np.linalg.norm(lifted, axis=0)
        comps = _complete_basis(lifted, d, q)
    eig = np.zeros(q)
    eig[:n_valid] = w[:n_valid]
    comps = _orient(comps)
    return PCAResult(comps, eig, mean, rank_deficient=n_valid < q, n_valid=n_valid)


def _kmeanspp(X, k, rng):
    n = X.shape[0]
    chosen = np.zeros(n, dtype=bool)
    first = int(rng.integers(n))
    centers = [first]
    chosen[first] = True
    d2 = ((X - X[first]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            r = rng.random() * total
            pick = int(np.searchsorted(np.cumsum(d2), r, side="right"))
            pick = min(pick, n - 1)
            while d2[pick] == 0:  # cumsum plateau at the right edge
                pick -= 1
        else:
            pick = int(np.flatnonzero(~chosen)[0])
        centers.append(pick)
        chosen[pick] = True
        d2 = np.minimum(d2, ((X - X[pick]) ** 2).sum(axis=1))
    return X[centers].copy()


def kmeans(X, k, seed=0, max_iter=300, tol=1e-6):
    """Lloyd's algorithm with k-means++ seeding.

    Deterministic given ``(X, k, seed)``. Empty clusters are re-seeded to the
    point farthest from its current centroid. Assignments in the result are the
    nearest final centroids (ties to the lowest index).
    """
    X = _as_matrix(X)
    n = X.shape[0]
    if k < 1 or k > n:
        raise ValidationError(f"k={k} must lie in [1, {n}]")
    rng = np.random.default_rng(seed)
    C = _kmeanspp(X, k, rng)
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        assign, dist = kernels.nearest_centroid(X, C)
        history.append(float(dist.sum()))
        sums, counts = kernels.segment_sum(X, assign, k)
        newC = C.copy()
        nz = counts > 0
        newC[nz] = sums[nz] / counts[nz, None]
        if not nz.all():
            dist = dist.copy()
            for j in np.flatnonzero(~nz):
                far = int(np.argmax(dist))
                newC[j] = X[far]
                dist[far] = -1.0
        shift = float(np.sqrt(((newC - C) ** 2).sum(axis=1)).max())
        C = newC
        if shift < tol:
            break
    assign, dist = kernels.nearest_centroid(X, C)
    inertia = float(dist.sum())
    history.append(inertia)
    return KMeansResult(C, assign, inertia, it, tuple(history))


def hungarian_max(profit):
    """Maximum-profit bijection on a square matrix, O(K^3)."""
    P = _as_matrix(profit, "profit")
    if P.shape[0] != P.shape[1]:
        raise DimensionError(f"profit matrix must be square, got {P.shape}")
    K = P.shape[0]
    if K == 0:
        return Assignment(np.zeros(0, dtype=np.int64), 0.0)
    perm = kernels.hungarian_min(P.max() - P)
    return Assignment(perm, float(P[np.arange(K), perm].sum()))


def cosine_lr(step, total_steps, lr0=0.1, lr_min=0.001):
    if total_steps <= 0:
        raise ValidationError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValidationError(f"step {step} outside [0, {total_steps}]")
    if not lr0 >= lr_min >= 0:
        raise ValidationError("need lr0 >= lr_min >= 0")
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + np.cos(np.pi * step / total_steps))
