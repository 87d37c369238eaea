"""Feature files (``.ptcf``) and dataset manifests (``.csv``).

``.ptcf`` layout, little-endian::

    b"PTCF" | u32 version=1 | u32 num_images | u32 patches | u32 dim | f32 payload

The payload is image-major, then patch-major, then channel. Row ``i`` of the
manifest describes image ``i`` of the feature file.
"""
import csv
import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError

MAGIC = b"PTCF"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")
MANIFEST_HEADER = ["image_id", "class_id", "labeled"]


@dataclass(frozen=True)
class FeatureSet:
    data: np.ndarray  # (num_images, patches, dim), float64

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ValidationError(f"features must be 3-D (images, patches, dim), got {data.shape}")
        side = math.isqrt(data.shape[1])
        if side * side != data.shape[1]:
            raise ValidationError(f"patch count {data.shape[1]} is not a perfect square")
        if not np.all(np.isfinite(data)):
            raise ValidationError("features contain non-finite values")
        object.__setattr__(self, "data", data)

    @property
    def num_images(self):
        return self.data.shape[0]

    @property
    def patches_per_image(self):
        return self.data.shape[1]

    @property
    def dim(self):
        return self.data.shape[2]

    @property
    def grid(self):
        return math.isqrt(self.data.shape[1])

    def flat(self):
        return self.data.reshape(-1, self.dim)

    def subset(self, indices):
        return FeatureSet(self.data[np.asarray(indices, dtype=np.int64)])


def write_features(fs, path):
    header = _HEADER.pack(MAGIC, VERSION, fs.num_images, fs.patches_per_image, fs.dim)
    payload = np.ascontiguousarray(fs.data, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_features(path):
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic, expected {MAGIC!r}", offset=0)
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header", offset=len(raw))
    _, version, m, n, d = _HEADER.unpack_from(raw, 0)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=4)
    expected = m * n * d * 4
    body = len(raw) - _HEADER.size
    if body < expected:
        raise FormatError(f"{path}: truncated payload, need {expected} bytes, have {body}",
                          offset=len(raw))
    if body > expected:
        raise FormatError(f"{path}: {body - expected} trailing bytes",
                          offset=_HEADER.size + expected)
    data = np.frombuffer(raw, dtype="<f4", count=m * n * d, offset=_HEADER.size)
    data = data.astype(np.float64).reshape(m, n, d)
    if not np.all(np.isfinite(data)):
        bad = int(np.flatnonzero(~np.isfinite(data.ravel()))[0])
        raise FormatError(f"{path}: non-finite payload value", offset=_HEADER.size + 4 * bad)
    try:
        return FeatureSet(data)
    except ValidationError as exc:
        raise FormatError(f"{path}: {exc}", offset=4) from exc


@dataclass(frozen=True)
class DatasetManifest:
    image_ids: tuple
    class_ids: np.ndarray  # int64, -1 when withheld
    labeled: np.ndarray  # bool

    def __post_init__(self):
        class_ids = np.asarray(self.class_ids, dtype=np.int64)
        labeled = np.asarray(self.labeled, dtype=bool)
        ids = tuple(str(i) for i in self.image_ids)
        if not ids:
            raise ValidationError("manifest has no entries")
        if not (len(ids) == class_ids.size == labeled.size):
            raise ValidationError("manifest columns differ in length")
        if np.any(class_ids < -1):
            raise ValidationError("class_id must be >= -1")
        bad = np.flatnonzero(labeled & (class_ids < 0))
        if bad.size:
            raise ValidationError(f"labeled entry '{ids[bad[0]]}' has class_id -1")
        if len(set(ids)) != len(ids):
            seen = set()
            dup = next(i for i in ids if i in seen or seen.add(i))
            raise ValidationError(f"duplicate image_id '{dup}'")
        object.__setattr__(self, "image_ids", ids)
        object.__setattr__(self, "class_ids", class_ids)
        object.__setattr__(self, "labeled", labeled)

    def __len__(self):
        return len(self.image_ids)

    @property
    def old_classes(self):
        return frozenset(int(c) for c in np.unique(self.class_ids[self.labeled]))

    @property
    def new_classes(self):
        known = self.class_ids[self.class_ids >= 0]
        return frozenset(int(c) for c in np.unique(known)) - self.old_classes

    @property
    def num_old(self):
        return len(self.old_classes)

    @property
    def num_classes(self):
        return len(self.old_classes | self.new_classes)


def parse_manifest(text, source="<manifest>"):
    reader = csv.reader(io.StringIO(text))
    rows = [r for r in reader if r]
    if not rows:
        raise ValidationError(f"{source}: empty manifest")
    if [h.strip() for h in rows[0]] != MANIFEST_HEADER:
        raise ValidationError(f"{source}: header must be {','.join(MANIFEST_HEADER)}")
    ids, classes, flags = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 3:
            raise ValidationError(f"{source}:{lineno}: expected 3 fields, got {len(row)}")
        try:
            cid = int(row[1])
            flag = int(row[2])
        except ValueError as exc:
            raise ValidationError(f"{source}:{lineno}: {exc}") from None
        if flag not in (0, 1):
            raise ValidationError(f"{source}:{lineno}: labeled must be 0 or 1")
        if flag == 1 and cid < 0:
            raise ValidationError(f"{source}:{lineno}: labeled row with class_id {cid}")
        ids.append(row[0].strip())
        classes.append(cid)
        flags.append(flag)
    return DatasetManifest(tuple(ids), np.array(classes, dtype=np.int64), np.array(flags, dtype=bool))


def load_manifest(path):
    return parse_manifest(Path(path).read_text(encoding="utf-8"), source=str(path))


def save_manifest(manifest, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for iid, cid, lab in zip(manifest.image_ids, manifest.class_ids, manifest.labeled):
            writer.writerow([iid, int(cid), int(lab)])


def sample_label_subset(manifest, per_class=1, seed=0):
    """Pick ``per_class`` labeled images from every old class.

    Returns image ids grouped by ascending class id; deterministic in ``seed``.
    """
    if per_class < 1:
        raise ValidationError("per_class must be >= 1")
    rng = np.random.default_rng(seed)
    chosen = []
    for cls in sorted(manifest.old_classes):
        members = np.flatnonzero(manifest.labeled & (manifest.class_ids == cls))
        if members.size < per_class:
            raise ValidationError(
                f"class {cls} has {members.size} labeled images, need {per_class}")
        pick = np.sort(rng.choice(members, size=per_class, replace=False))
        chosen.extend(manifest.image_ids[i] for i in pick)
    return chosen


def indices_of(manifest, image_ids):
    lookup = {iid: i for i, iid in enumerate(manifest.image_ids)}
    return np.array([lookup[i] for i in image_ids], dtype=np.int64)
