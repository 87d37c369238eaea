"""Part-level correspondence labels from patch-token features.

Pipeline (``build_labels``):

1. top uncentered principal direction of a one-image-per-class subset gives an
   objectness score per patch; min-max normalise it with subset statistics and
   threshold to get a foreground mask;
2. top-3 centered principal directions of the subset's foreground patches give
   a 3-d fine-grained embedding, l2-normalised per patch;
3. k-means over a candidate set of k on the embedded foreground patches of
   every image (``LabelConfig.cluster_on``), scored by
   ``min centroid distance * (smallest cluster / largest cluster)``;
4. every foreground patch of every image gets ``1 + nearest centroid``;
   background is 0;
5. optionally each first-order part is re-clustered in its own PCA space to
   produce second-order children.
"""
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics
from .errors import DegenerateDataError, FormatError, PartcoError, ValidationError
from .features import FeatureSet, indices_of, sample_label_subset

ORDER_CODES = {"1": 1, "2": 2, "both": 3}
ORDER_NAMES = {v: k for k, v in ORDER_CODES.items()}


@dataclass(frozen=True)
class ObjectProjection:
    w_obj: np.ndarray
    orientation_sign: float
    score_min: float
    score_max: float


@dataclass(frozen=True)
class FineProjection:
    w_fg: np.ndarray  # d x 3
    mean: np.ndarray  # foreground mean used for centering
    eigenvalues: np.ndarray
    rank_deficient: bool = False


@dataclass(frozen=True)
class KSelection:
    k_star: int
    scores: dict  # k -> score
    result: numerics.KMeansResult  # clustering for k_star


@dataclass(frozen=True)
class LabelLevel:
    level: int
    k_star: int
    centroids: np.ndarray
    labels: np.ndarray  # (images, patches) int64, 0 = background
    parent_of: np.ndarray = None  # child id - 1 -> parent id (level 2 only)

    def children_of(self, parent):
        return np.flatnonzero(self.parent_of == parent) + 1


@dataclass(frozen=True)
class PartLabelStore:
    order: str  # "1", "2" or "both"
    levels: tuple
    masks: np.ndarray = field(default=None, compare=False, repr=False)
    k_scores: dict = field(default=None, compare=False, repr=False)

    def level(self, n):
        for lv in self.levels:
            if lv.level == n:
                return lv
        raise KeyError(f"store has no level {n}")

    def active_levels(self):
        """Label levels consumed by training for this store's order."""
        wanted = {"1": (1,), "2": (2,), "both": (1, 2)}[self.order]
        return tuple(self.level(n) for n in wanted)

    @property
    def num_images(self):
        return self.levels[0].labels.shape[0]

    @property
    def unsplit_parents(self):
        if not any(lv.level == 2 for lv in self.levels):
            return ()
        parents, counts = np.unique(self.level(2).parent_of, return_counts=True)
        return tuple(int(p) for p in parents[counts == 1])


# ---------------------------------------------------------------------------
# step 1: objectness


def fit_object_projection(subset):
    X = subset.flat()
    if X.shape[0] < 2:
        raise ValidationError("object projection needs at least 2 patches")
    pca = numerics.pca_top_components(X, 1, centered=False)
    if pca.n_valid == 0:
        raise DegenerateDataError("features are identically zero")
    w = pca.components[:, 0]
    scores = X @ w
    lo, hi = float(scores.min()), float(scores.max())
    if hi - lo <= 1e-12 * max(abs(lo), abs(hi), 1e-300):
        raise DegenerateDataError("objectness scores are constant; no object/background contrast")
    centered = scores - scores.mean()
    sign = -1.0 if np.mean(centered ** 3) < 0 else 1.0
    if sign < 0:
        lo, hi = -hi, -lo
    return ObjectProjection(w, sign, lo, hi)


def objectness_scores(fs, proj):
    if fs.dim != proj.w_obj.shape[0]:
        raise ValidationError(f"feature dim {fs.dim} != projection dim {proj.w_obj.shape[0]}")
    raw = proj.orientation_sign * (fs.data @ proj.w_obj)
    return np.clip((raw - proj.score_min) / (proj.score_max - proj.score_min), 0.0, 1.0)


def objectness_mask(fs, proj, tau_obj=0.6):
    """Boolean (images, patches) foreground mask."""
    return objectness_scores(fs, proj) > tau_obj


# ---------------------------------------------------------------------------
# step 1b: fine-grained projection


def fit_finegrained_projection(fs, masks):
    masks = np.asarray(masks, dtype=bool)
    fg = fs.data[masks]
    if fg.shape[0] < 4:
        raise DegenerateDataError(f"only {fg.shape[0]} foreground patches; need at least 4")
    pca = numerics.pca_top_components(fg, 3, centered=True)
    return FineProjection(pca.components, pca.mean, pca.eigenvalues, pca.rank_deficient)


def l2_normalize_rows(x, eps=1e-12):
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.where(norms > eps, x / np.maximum(norms, eps), 0.0)


def finegrained_features(fs, masks, fine):
    """Normalised 3-d embedding per patch, zero on background. Shape (images, patches, 3)."""
    masks = np.asarray(masks, dtype=bool)
    out = np.zeros(masks.shape + (fine.w_fg.shape[1],))
    out[masks] = l2_normalize_rows((fs.data[masks] - fine.mean) @ fine.w_fg)
    return out


# ---------------------------------------------------------------------------
# step 2: k selection and assignment


def selection_score(result):
    """``min_{i != j} |c_i - c_j| * min|C| / max|C|`` for one clustering."""
    C = result.centroids
    k = C.shape[0]
    sizes = np.bincount(result.assignments, minlength=k)
    diff = C[:, None, :] - C[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=2))
    dist[np.diag_indices(k)] = np.inf
    return float(dist.min() * sizes.min() / sizes.max())


def select_k(points, candidates, seed=0, max_iter=300, tol=1e-6):
    points = np.asarray(points, dtype=np.float64)
    candidates = [int(k) for k in candidates]
    if not candidates:
        raise ValidationError("candidate list for k is empty")
    n = points.shape[0]
    for k in candidates:
        if k < 2 or k > n:
            raise ValidationError(f"candidate k={k} outside [2, {n}]")
    scores, results = {}, {}
    best = None
    for k in sorted(set(candidates)):
        res = numerics.kmeans(points, k, seed=seed, max_iter=max_iter, tol=tol)
        scores[k] = selection_score(res)
        results[k] = res
        if best is None or scores[k] > scores[best]:
            best = k
    if scores[best] <= 0.0:
        raise DegenerateDataError("every candidate k scored zero (coincident centroids)")
    return KSelection(best, scores, results[best])


def assign_part_labels(fine_feats, centroids, masks):
    masks = np.asarray(masks, dtype=bool)
    labels = np.zeros(masks.shape, dtype=np.int64)
    if masks.any():
        idx, _ = numerics.kernels.nearest_centroid(fine_feats[masks], centroids)
        labels[masks] = idx + 1
    return labels


# ---------------------------------------------------------------------------
# second order


def _child_seed(seed, parent):
    return int(np.random.SeedSequence([int(seed), int(parent)]).generate_state(1)[0])


def _split_parent(X, seed, candidates, min_members, min_split_gain, max_iter, tol,
                  tight_radius=0.0):
    """Cluster one parent's member rows; return per-row child index or None (keep whole)."""
    n = X.shape[0]
    if n < min_members:
        return None
    total = ((X - X.mean(axis=0)) ** 2).sum()
    if np.sqrt(total / n) < tight_radius:
        return None
    pca = numerics.pca_top_components(X, 3, centered=True)
    if pca.n_valid == 0:
        return None
    Y = l2_normalize_rows((X - pca.mean) @ pca.components)
    cands = [k for k in candidates if 2 <= k <= n]
    if not cands:
        return None
    try:
        sel = select_k(Y, cands, seed=seed, max_iter=max_iter, tol=tol)
    except DegenerateDataError:
        return None
    assign = sel.result.assignments
    sums, counts = numerics.kernels.segment_sum(X, assign, sel.k_star)
    means = sums / np.maximum(counts, 1)[:, None]
    within = ((X - means[assign]) ** 2).sum()
    if total <= 0 or 1.0 - within / total < min_split_gain:
        return None
    return assign


def refine_second_order(fs, masks, first_order, seed=0, candidates=range(2, 7),
                        min_members=8, min_split_gain=0.3, tight_ratio=0.05, max_iter=300,
                        tol=1e-6):
    """Split each first-order part into children; child ids are dense and global.

    A parent is kept whole when it has fewer than ``min_members`` patches, when
    it is tight (RMS radius below ``tight_ratio`` times the smallest distance
    between first-order part means), or when the best split explains less than
    ``min_split_gain`` of its raw-feature scatter.
    """
    lv1 = first_order.level(1)
    flat = fs.flat()
    parents = lv1.labels.ravel()
    sums, counts = numerics.kernels.segment_sum(flat, parents - 1, lv1.k_star)
    present = counts > 0
    means = sums[present] / counts[present, None]
    tight_radius = 0.0
    if means.shape[0] >= 2:
        gaps = np.sqrt(((means[:, None] - means[None]) ** 2).sum(axis=2))
        tight_radius = tight_ratio * gaps[~np.eye(means.shape[0], dtype=bool)].min()
    children = np.zeros_like(parents)
    parent_of, centroids = [], []
    next_id = 1
    for parent in range(1, lv1.k_star + 1):
        idx = np.flatnonzero(parents == parent)
        X = flat[idx]
        assign = _split_parent(X, _child_seed(seed, parent), list(candidates), min_members,
                               min_split_gain, max_iter, tol, tight_radius)
        if assign is None:
            assign = np.zeros(idx.size, dtype=np.int64)
        n_child = int(assign.max()) + 1 if idx.size else 1
        for c in range(n_child):
            sel = assign == c
            centroids.append(X[sel].mean(axis=0) if sel.any() else np.zeros(fs.dim))
            parent_of.append(parent)
        children[idx] = assign + next_id
        next_id += n_child
    lv2 = LabelLevel(2, next_id - 1, np.array(centroids), children.reshape(lv1.labels.shape),
                     np.array(parent_of, dtype=np.int64))
    return PartLabelStore("2", (lv1, lv2), masks=first_order.masks, k_scores=first_order.k_scores)


# ---------------------------------------------------------------------------
# orchestration


@dataclass(frozen=True)
class LabelConfig:
    per_class: int = 1
    k_candidates: tuple = tuple(range(2, 11))
    k_candidates_2nd: tuple = tuple(range(2, 7))
    tau_obj: float = 0.6
    min_members: int = 8
    min_split_gain: float = 0.3
    kmeans_max_iter: int = 300
    kmeans_tol: float = 1e-6
    cluster_on: str = "all"  # "all" foreground patches or the fitting "subset" only


class _stage:
    """Prefix errors raised inside a pipeline stage with the stage name."""

    def __init__(self, name):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, etype, exc, tb):
        if exc is not None and isinstance(exc, PartcoError) and not getattr(exc, "_staged", False):
            exc.args = (f"[{self.name}] {exc}",) + exc.args[1:]
            exc._staged = True
        return False


def build_labels(fs, manifest, order="1", config=None, seed=0):
    config = config or LabelConfig()
    order = str(order)
    if order not in ORDER_CODES:
        raise ValidationError(f"order must be one of {sorted(ORDER_CODES)}, got {order!r}")
    if config.cluster_on not in ("all", "subset"):
        raise ValidationError(f"cluster_on must be 'all' or 'subset', got {config.cluster_on!r}")
    if not config.k_candidates:
        raise ValidationError("k candidate list is empty")
    if len(manifest) != fs.num_images:
        raise ValidationError(
            f"manifest has {len(manifest)} rows but features hold {fs.num_images} images")

    with _stage("sample_label_subset"):
        ids = sample_label_subset(manifest, config.per_class, seed)
        sub_idx = indices_of(manifest, ids)
        subset = fs.subset(sub_idx)
    with _stage("fit_object_projection"):
        obj = fit_object_projection(subset)
    with _stage("objectness_mask"):
        masks = objectness_mask(fs, obj, config.tau_obj)
    with _stage("fit_finegrained_projection"):
        fine = fit_finegrained_projection(subset, masks[sub_idx])
    all_feats = finegrained_features(fs, masks, fine)
    with _stage("select_k"):
        if config.cluster_on == "subset":
            points = all_feats[sub_idx][masks[sub_idx]]
        else:
            points = all_feats[masks]
        cands = [k for k in config.k_candidates if k <= points.shape[0]]
        if not cands:
            raise DegenerateDataError(f"only {points.shape[0]} foreground points for k-means")
        sel = select_k(points, cands, seed=seed, max_iter=config.kmeans_max_iter,
                       tol=config.kmeans_tol)
    with _stage("assign_part_labels"):
        labels = assign_part_labels(all_feats, sel.result.centroids, masks)
    lv1 = LabelLevel(1, sel.k_star, sel.result.centroids, labels)
    store = PartLabelStore("1", (lv1,), masks=masks, k_scores=sel.scores)
    if order in ("2", "both"):
        with _stage("refine_second_order"):
            refined = refine_second_order(
                fs, masks, store, seed=seed, candidates=config.k_candidates_2nd,
                min_members=config.min_members, min_split_gain=config.min_split_gain,
                max_iter=config.kmeans_max_iter, tol=config.kmeans_tol)
        store = PartLabelStore(order, refined.levels, masks=masks, k_scores=sel.scores)
    return store


# ---------------------------------------------------------------------------
# .plm files
#
#   b"PLBL" | u32 version | u32 order code | u32 n_levels | u32 images | u32 patches
#   per level: u32 level | u32 k_star | u32 rows | u32 cols | f64 centroids
#              | u32 has_parent | [u16 parent id * k_star]
#   per level: u16 labels, images * patches

PLM_MAGIC = b"PLBL"
PLM_VERSION = 1


def store_to_bytes(store):
    lv0 = store.levels[0]
    m, n = lv0.labels.shape
    out = [struct.pack("<4sIIIII", PLM_MAGIC, PLM_VERSION, ORDER_CODES[store.order],
                       len(store.levels), m, n)]
    for lv in store.levels:
        cent = np.asarray(lv.centroids, dtype="<f8").reshape(lv.centroids.shape[0], -1) \
            if lv.centroids is not None and np.size(lv.centroids) else np.zeros((0, 0))
        out.append(struct.pack("<IIII", lv.level, lv.k_star, cent.shape[0], cent.shape[1]))
        out.append(np.ascontiguousarray(cent, dtype="<f8").tobytes())
        if lv.parent_of is None:
            out.append(struct.pack("<I", 0))
        else:
            out.append(struct.pack("<I", 1))
            out.append(np.asarray(lv.parent_of, dtype="<u2").tobytes())
    for lv in store.levels:
        if lv.labels.max(initial=0) > 0xFFFF:
            raise ValidationError("label id exceeds 16-bit range")
        out.append(np.ascontiguousarray(lv.labels, dtype="<u2").tobytes())
    return b"".join(out)


def store_from_bytes(raw, source="<plm>"):
    pos = 0

    def take(nbytes, what):
        nonlocal pos
        if pos + nbytes > len(raw):
            raise FormatError(f"{source}: truncated while reading {what}", offset=pos)
        chunk = raw[pos:pos + nbytes]
        pos += nbytes
        return chunk

    if raw[:4] != PLM_MAGIC:
        raise FormatError(f"{source}: bad magic, expected {PLM_MAGIC!r}", offset=0)
    _, version, code, nlev, m, n = struct.unpack("<4sIIIII", take(24, "header"))
    if version != PLM_VERSION:
        raise FormatError(f"{source}: unsupported version {version}", offset=4)
    if code not in ORDER_NAMES:
        raise FormatError(f"{source}: unknown order code {code}", offset=8)
    metas = []
    for _ in range(nlev):
        level, k_star, rows, cols = struct.unpack("<IIII", take(16, "level header"))
        cent = np.frombuffer(take(8 * rows * cols, "centroids"), dtype="<f8")
        cent = cent.astype(np.float64).reshape(rows, cols)
        (has_parent,) = struct.unpack("<I", take(4, "parent flag"))
        parent = None
        if has_parent:
            parent = np.frombuffer(take(2 * k_star, "parent map"), dtype="<u2").astype(np.int64)
        metas.append((level, k_star, cent, parent))
    levels = []
    for level, k_star, cent, parent in metas:
        labels = np.frombuffer(take(2 * m * n, f"level {level} labels"), dtype="<u2")
        levels.append(LabelLevel(level, k_star, cent, labels.astype(np.int64).reshape(m, n),
                                 parent))
    if pos != len(raw):
        raise FormatError(f"{source}: {len(raw) - pos} trailing bytes", offset=pos)
    return PartLabelStore(ORDER_NAMES[code], tuple(levels))


def write_store(store, path):
    Path(path).write_bytes(store_to_bytes(store))


def read_store(path):
    return store_from_bytes(Path(path).read_bytes(), source=str(path))


def dump_ppm(labels, grid, path):
    """Debug image of one label map: one pixel per patch, fixed palette, 0 is black."""
    rng = np.random.default_rng(12345)
    palette = rng.integers(40, 256, size=(int(labels.max()) + 1, 3))
    palette[0] = 0
    pix = palette[np.asarray(labels).reshape(grid, grid)]
    with open(path, "w") as fh:
        fh.write(f"P3\n{grid} {grid}\n255\n")
        for row in pix:
            fh.write(" ".join(f"{r} {g} {b}" for r, g, b in row) + "\n")
