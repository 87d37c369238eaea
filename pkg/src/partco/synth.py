"""Synthetic patch-feature datasets with planted classes, parts and subparts.

Feature model for a foreground patch of part ``k``, subpart ``j`` in an image
of class ``y``::

    object_strength * u
      + part_scale * p_k               (part prototype, shared by all classes)
      + subpart_scale * s_kj           (subpart offset)
      + class_scale * A R_kj a_y       (class attribute seen through part/subpart)
      + noise_sigma * N(0, I)

Background patches carry a per-image background vector (orthogonal to ``u``)
plus the same isotropic noise. ``u``, ``A`` and the background subspace are
mutually orthogonal; prototypes come from farthest-point sampling on the unit
sphere of the complement of ``u``.
"""
import dataclasses
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .features import DatasetManifest, FeatureSet
from .partlabels import LabelLevel, PartLabelStore


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 20
    old_classes: int = 10
    images_per_class: int = 30
    grid: int = 16
    dim: int = 64
    parts_per_class: int = 4
    part_vocab_size: int = 4
    subparts_per_part: int = 2
    noise_sigma: float = 0.0
    occlusion_prob: float = 0.0
    scale_jitter: float = 0.3
    foreground_fraction: float = 0.35
    seed: int = 0
    num_superclasses: int = 1
    object_strength: float = 5.0
    part_scale: float = 3.0
    subpart_scale: float = 0.3
    class_scale: float = 0.6
    background_scale: float = 2.0
    attribute_dim: int = 8
    background_dim: int = 8
    labeled_fraction: float = 0.5
    shared_class_signal: bool = True  # one class offset per part, same for its subparts

    def validate(self):
        if not 1 <= self.old_classes <= self.num_classes:
            raise ValidationError("need 1 <= old_classes <= num_classes")
        for name in ("occlusion_prob", "scale_jitter", "foreground_fraction", "labeled_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name}={v} outside [0, 1]")
        if self.parts_per_class > self.part_vocab_size:
            raise ValidationError("parts_per_class exceeds part_vocab_size")
        if self.num_superclasses < 1:
            raise ValidationError("num_superclasses must be >= 1")
        if self.num_superclasses > 1 and self.num_superclasses * self.parts_per_class > self.part_vocab_size:
            raise ValidationError("disjoint superclass compositions need "
                                  "num_superclasses * parts_per_class <= part_vocab_size")
        if self.parts_per_class < 1 or self.subparts_per_part < 1:
            raise ValidationError("need at least one part and one subpart")
        if self.parts_per_class > self.grid or self.subparts_per_part > self.grid:
            raise ValidationError(
                f"{self.parts_per_class} parts x {self.subparts_per_part} subparts "
                f"do not fit a {self.grid}x{self.grid} grid")
        if 1 + self.attribute_dim + self.background_dim > self.dim:
            raise ValidationError("dim too small for object, attribute and background subspaces")
        if self.images_per_class < 1 or self.grid < 1:
            raise ValidationError("images_per_class and grid must be positive")
        for name in ("noise_sigma", "object_strength", "part_scale", "subpart_scale",
                     "class_scale", "background_scale"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be nonnegative")


@dataclass(frozen=True)
class PlantedTruth:
    class_ids: np.ndarray  # (images,)
    parts: np.ndarray  # (images, patches), vocab id + 1, 0 = background
    subparts: np.ndarray  # (images, patches), global subpart id + 1, 0 = background
    subparts_per_part: int

    def to_store(self):
        """Planted maps in the ``.plm`` envelope: level 1 parts, level 2 subparts."""
        k1 = int(self.parts.max(initial=0))
        k2 = int(self.subparts.max(initial=0))
        parent = (np.arange(k2) // self.subparts_per_part + 1).astype(np.int64)
        return PartLabelStore("both", (
            LabelLevel(1, k1, np.zeros((0, 0)), self.parts),
            LabelLevel(2, k2, np.zeros((0, 0)), self.subparts, parent),
        ))


PRESETS = {
    "fine_grained": dict(
        parts_per_class=4, part_vocab_size=4, subparts_per_part=2, num_superclasses=1,
        part_scale=5.0, subpart_scale=0.3, class_scale=1.5, background_scale=0.5,
        shared_class_signal=True, noise_sigma=0.3, occlusion_prob=0.1,
    ),
    "generic": dict(
        parts_per_class=2, part_vocab_size=8, subparts_per_part=3, num_superclasses=4,
        part_scale=4.0, subpart_scale=0.9, class_scale=0.5, background_scale=0.5,
        shared_class_signal=False, noise_sigma=0.3, occlusion_prob=0.1,
    ),
}


def preset(name, **overrides):
    if name not in PRESETS:
        raise ValidationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return dataclasses.replace(SynthConfig(**PRESETS[name]), **overrides)


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _farthest_points(rng, basis, count, pool=256):
    """Farthest-point sampling of ``count`` unit vectors in span(basis)."""
    cand = _unit(rng.standard_normal((pool, basis.shape[1])) @ basis.T)
    picked = [0]
    dmin = np.linalg.norm(cand - cand[0], axis=1)
    for _ in range(1, count):
        nxt = int(np.argmax(dmin))
        picked.append(nxt)
        dmin = np.minimum(dmin, np.linalg.norm(cand - cand[nxt], axis=1))
    return cand[picked]


def _layout(rng, cfg, nparts):
    """Per-patch (band index, subpart index) for one object, -1 outside it."""
    g = cfg.grid
    base = cfg.foreground_fraction * g * g
    scale = max(0.25, 1.0 + cfg.scale_jitter * rng.uniform(-1.0, 1.0))
    area = max(1.0, base * scale)
    # whole bands per part so every visible part of one object has equal area
    per_band = max(1, int(round(np.sqrt(area) / nparts)))
    along = min(nparts * per_band, nparts * (g // nparts))
    across = int(np.clip(round(area / along), cfg.subparts_per_part, g))
    vertical = bool(rng.integers(2))
    reverse = bool(rng.integers(2))
    r0 = int(rng.integers(0, g - along + 1))
    c0 = int(rng.integers(0, g - across + 1))
    band = -np.ones((g, g), dtype=np.int64)
    sub = -np.ones((g, g), dtype=np.int64)
    band_rows = np.array_split(np.arange(along), nparts)
    sub_cols = np.array_split(np.arange(across), cfg.subparts_per_part)
    for b, rows in enumerate(band_rows):
        bidx = nparts - 1 - b if reverse else b
        for s, cols in enumerate(sub_cols):
            rr, cc = np.meshgrid(r0 + rows, c0 + cols, indexing="ij")
            band[rr, cc] = bidx
            sub[rr, cc] = s
    if vertical:
        band, sub = band.T.copy(), sub.T.copy()
    return band.ravel(), sub.ravel()


def generate(cfg):
    """Return ``(FeatureSet, DatasetManifest, PlantedTruth)`` for ``cfg``."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    d, P, S = cfg.dim, cfg.part_vocab_size, cfg.subparts_per_part
    basis, _ = np.linalg.qr(rng.standard_normal((d, d)))
    u = basis[:, 0]
    attr = basis[:, 1:1 + cfg.attribute_dim]
    bg_basis = basis[:, 1 + cfg.attribute_dim:1 + cfg.attribute_dim + cfg.background_dim]
    complement = basis[:, 1:]

    protos = _farthest_points(rng, complement, P)
    sub_offsets = _unit(rng.standard_normal((P, S, d - 1)) @ complement.T)
    r = cfg.attribute_dim
    mixes = np.linalg.qr(rng.standard_normal((P, S, r, r)))[0]
    if cfg.shared_class_signal:
        mixes = np.repeat(mixes[:, :1], S, axis=1)
    codes = _unit(rng.standard_normal((cfg.num_classes, r)))
    # class_signal[y, k, j] = A R_kj a_y, unit norm
    class_signal = np.einsum("dr,kjrs,ys->ykjd", attr, mixes, codes)

    if cfg.num_superclasses > 1:
        comps = [np.arange(s * cfg.parts_per_class, (s + 1) * cfg.parts_per_class)
                 for s in range(cfg.num_superclasses)]
        composition = [comps[y % cfg.num_superclasses] for y in range(cfg.num_classes)]
    else:
        base = np.arange(cfg.parts_per_class)
        composition = [base for _ in range(cfg.num_classes)]

    n_img = cfg.num_classes * cfg.images_per_class
    N = cfg.grid * cfg.grid
    classes = np.repeat(np.arange(cfg.num_classes), cfg.images_per_class)
    order = rng.permutation(n_img)
    classes = classes[order]

    data = np.zeros((n_img, N, d))
    parts = np.zeros((n_img, N), dtype=np.int64)
    subparts = np.zeros((n_img, N), dtype=np.int64)
    for i in range(n_img):
        y = int(classes[i])
        comp = composition[y]
        band, sub = _layout(rng, cfg, len(comp))
        visible = rng.random(len(comp)) >= cfg.occlusion_prob
        bg_vec = cfg.background_scale * _unit(rng.standard_normal(bg_basis.shape[1])) @ bg_basis.T
        feats = np.tile(bg_vec, (N, 1))
        fg = band >= 0
        fg[fg] = visible[band[fg]]
        k = comp[band[fg]]
        j = sub[fg]
        feats[fg] = (cfg.object_strength * u
                     + cfg.part_scale * protos[k]
                     + cfg.subpart_scale * sub_offsets[k, j]
                     + cfg.class_scale * class_signal[y, k, j])
        if cfg.noise_sigma > 0:
            feats += cfg.noise_sigma * rng.standard_normal((N, d))
        data[i] = feats
        parts[i, fg] = k + 1
        subparts[i, fg] = k * S + j + 1

    labeled = np.zeros(n_img, dtype=bool)
    for y in range(cfg.old_classes):
        members = np.flatnonzero(classes == y)
        n_lab = int(np.floor(cfg.labeled_fraction * members.size))
        labeled[np.sort(rng.choice(members, size=n_lab, replace=False))] = True

    manifest = DatasetManifest(tuple(f"img_{i:05d}" for i in range(n_img)), classes, labeled)
    return FeatureSet(data), manifest, PlantedTruth(classes, parts, subparts, S)
