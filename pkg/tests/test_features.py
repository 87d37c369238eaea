import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from partco.errors import FormatError, ValidationError
from partco.features import (DatasetManifest, FeatureSet, load_manifest, parse_manifest,
                             read_features, sample_label_subset, save_manifest, write_features)


def test_featureset_validates_grid_and_finiteness():
    FeatureSet(np.zeros((2, 4, 3)))
    with pytest.raises(ValidationError):
        FeatureSet(np.zeros((2, 5, 3)))
    bad = np.zeros((1, 4, 2))
    bad[0, 0, 0] = np.nan
    with pytest.raises(ValidationError):
        FeatureSet(bad)


def test_featureset_properties():
    fs = FeatureSet(np.zeros((3, 16, 5)))
    assert (fs.num_images, fs.patches_per_image, fs.dim, fs.grid) == (3, 16, 5, 4)
    assert fs.flat().shape == (48, 5)
    assert fs.subset([2, 0]).num_images == 2


@settings(max_examples=25, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 3), st.sampled_from([1, 4, 9]),
                                    st.integers(1, 5)),
              elements=st.floats(-1e6, 1e6, allow_nan=False, width=32)))
def test_ptcf_round_trip(tmp_path_factory, data):
    path = tmp_path_factory.mktemp("ptcf") / "x.ptcf"
    fs = FeatureSet(data.astype(np.float64))
    write_features(fs, path)
    back = read_features(path)
    assert np.array_equal(back.data, fs.data)


def test_ptcf_header_layout(tmp_path):
    path = tmp_path / "a.ptcf"
    write_features(FeatureSet(np.ones((2, 4, 3))), path)
    raw = path.read_bytes()
    assert struct.unpack_from("<4sIIII", raw) == (b"PTCF", 1, 2, 4, 3)
    assert len(raw) == 20 + 2 * 4 * 3 * 4


@pytest.mark.parametrize("mutate,offset", [
    (lambda r: b"XXXX" + r[4:], 0),
    (lambda r: r[:4] + struct.pack("<I", 9) + r[8:], 4),
    (lambda r: r[:-3], None),
    (lambda r: r + b"\0\0\0\0", 20 + 24 * 4),
])
def test_ptcf_corruption_is_format_error(tmp_path, mutate, offset):
    path = tmp_path / "a.ptcf"
    write_features(FeatureSet(np.ones((2, 4, 3))), path)
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(FormatError) as info:
        read_features(path)
    if offset is not None:
        assert info.value.offset == offset


def test_manifest_round_trip_and_lf(tmp_path):
    m = DatasetManifest(("a", "b", "c"), np.array([0, 1, 1]), np.array([True, False, True]))
    path = tmp_path / "m.csv"
    save_manifest(m, path)
    raw = path.read_bytes()
    assert raw.startswith(b"image_id,class_id,labeled\n") and b"\r" not in raw
    back = load_manifest(path)
    assert back.image_ids == m.image_ids
    assert np.array_equal(back.class_ids, m.class_ids)
    assert np.array_equal(back.labeled, m.labeled)
    assert back.old_classes == {0, 1}


@pytest.mark.parametrize("text", [
    "image_id,class_id\nx,0\n",
    "image_id,class_id,labeled\nx,zero,1\n",
    "image_id,class_id,labeled\nx,0,1\nx,1,0\n",
])
def test_manifest_errors(text):
    with pytest.raises((ValidationError, FormatError)):
        parse_manifest(text)


def test_sample_label_subset_one_per_old_class_and_deterministic():
    ids = tuple(f"i{k}" for k in range(8))
    m = DatasetManifest(ids, np.array([0, 0, 1, 1, 2, 2, 3, 3]),
                        np.array([1, 1, 1, 1, 0, 0, 0, 0], dtype=bool))
    a = sample_label_subset(m, 1, seed=5)
    assert len(a) == 2
    assert a == sample_label_subset(m, 1, seed=5)
    with pytest.raises(ValidationError, match="class 0"):
        sample_label_subset(m, 3)
