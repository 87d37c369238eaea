import numpy as np
import pytest

from partco.errors import DegenerateDataError, FormatError, ValidationError
from partco.evaluation import part_label_agreement
from partco.features import DatasetManifest, FeatureSet
from partco.numerics import KMeansResult, kmeans
from partco.partlabels import (LabelConfig, assign_part_labels, build_labels,
                               fit_object_projection, objectness_scores, read_store,
                               refine_second_order, select_k, selection_score, store_from_bytes,
                               store_to_bytes, write_store)
from partco.synth import generate, preset


def test_selection_score_hand_example():
    res = KMeansResult(np.array([[0.0, 0], [3, 4]]), np.array([0, 0, 0, 1]), 0.0, 1, ())
    assert selection_score(res) == pytest.approx(5.0 / 3.0)


def test_select_k_matches_brute_force_recomputation(rng):
    for trial in range(10):
        X = rng.standard_normal((40, 3))
        cands = sorted(set(rng.integers(2, 7, 3).tolist()))
        sel = select_k(X, cands, seed=trial)
        brute = {k: selection_score(kmeans(X, k, seed=trial)) for k in cands}
        assert sel.scores == pytest.approx(brute)
        best = max(brute.values())
        assert sel.k_star == min(k for k, v in brute.items() if v == best)


def test_select_k_rejects_empty_and_out_of_range(rng):
    X = rng.standard_normal((5, 2))
    with pytest.raises(ValidationError):
        select_k(X, [])
    with pytest.raises(ValidationError):
        select_k(X, [6])


def test_assign_part_labels_background_and_nearest():
    feats = np.array([[[1.0, 0], [0, 1], [5, 5]]])
    masks = np.array([[True, True, False]])
    cent = np.array([[1.0, 0], [0, 1]])
    assert assign_part_labels(feats, cent, masks).tolist() == [[1, 2, 0]]


def test_object_projection_constant_features_is_degenerate():
    with pytest.raises(DegenerateDataError):
        fit_object_projection(FeatureSet(np.ones((2, 4, 3))))


def test_planted_recovery_noise_free(small_fine):
    fs, manifest, truth = small_fine
    store = build_labels(fs, manifest, "1", seed=0)
    lv = store.level(1)
    assert lv.k_star == 4
    assert np.array_equal(store.masks, truth.parts > 0)
    assert part_label_agreement(lv.labels, truth.parts) == 1.0
    # label 0 exactly where the mask is 0
    assert np.array_equal(lv.labels == 0, ~store.masks)


def test_rebuild_is_bitwise_identical(small_fine):
    fs, manifest, _ = small_fine
    a = store_to_bytes(build_labels(fs, manifest, "both", seed=4))
    b = store_to_bytes(build_labels(fs, manifest, "both", seed=4))
    assert a == b


@pytest.mark.parametrize("scale", [0.01, 7.5])
def test_labels_invariant_to_positive_scaling(small_fine, scale):
    fs, manifest, _ = small_fine
    base = build_labels(fs, manifest, "1", seed=0).level(1).labels
    scaled = build_labels(FeatureSet(fs.data * scale), manifest, "1", seed=0).level(1).labels
    assert np.array_equal(base, scaled)


def test_objectness_scores_clamped(small_fine):
    fs, manifest, _ = small_fine
    proj = fit_object_projection(fs.subset([0, 1]))
    s = objectness_scores(fs, proj)
    assert s.min() >= 0.0 and s.max() <= 1.0


def test_second_order_partitions_parents(small_fine):
    fs, manifest, _ = small_fine
    store = build_labels(fs, manifest, "both", seed=0)
    l1, l2 = store.level(1), store.level(2)
    assert l2.parent_of.shape == (l2.k_star,)
    assert np.array_equal(l2.labels == 0, l1.labels == 0)
    fg = l2.labels > 0
    assert np.array_equal(l2.parent_of[l2.labels[fg] - 1], l1.labels[fg])
    assert sorted(set(l2.labels[fg].tolist())) == list(range(1, l2.k_star + 1))


def test_second_order_splits_planted_sub_blobs():
    # one first-order part made of two far-apart sub-blobs, one tight part
    rng = np.random.default_rng(0)
    M, N, d = 4, 16, 6
    data = np.zeros((M, N, d))
    data[:, :8] = [10, 0, 0, 0, 0, 0]
    data[:, :4, 1] = 3.0
    data[:, 8:12] = [0, 10, 0, 0, 0, 0]
    data += 1e-3 * rng.standard_normal(data.shape)
    fs = FeatureSet(data)
    lab = np.zeros((M, N), dtype=np.int64)
    lab[:, :8] = 1
    lab[:, 8:12] = 2
    from partco.partlabels import LabelLevel, PartLabelStore
    first = PartLabelStore("1", (LabelLevel(1, 2, np.zeros((2, 3)), lab),), masks=lab > 0)
    out = refine_second_order(fs, lab > 0, first, seed=0)
    l2 = out.level(2)
    kids = l2.children_of(1)
    assert len(kids) == 2
    got = l2.labels[:, :8]
    assert np.all(got[:, :4] == got[0, 0]) and np.all(got[:, 4:8] == got[0, 4])
    assert got[0, 0] != got[0, 4]
    assert len(l2.children_of(2)) == 1
    assert out.unsplit_parents == (2,)


def test_store_round_trip_and_corruption(tmp_path, small_fine):
    fs, manifest, _ = small_fine
    store = build_labels(fs, manifest, "both", seed=0)
    path = tmp_path / "x.plm"
    write_store(store, path)
    back = read_store(path)
    assert back.order == "both"
    for a, b in zip(store.levels, back.levels):
        assert a.k_star == b.k_star
        assert np.array_equal(a.labels, b.labels)
        assert np.allclose(a.centroids, b.centroids)
    raw = path.read_bytes()
    with pytest.raises(FormatError):
        store_from_bytes(b"NOPE" + raw[4:])
    with pytest.raises(FormatError):
        store_from_bytes(raw[:-1])
    with pytest.raises(FormatError):
        store_from_bytes(raw + b"\0")


def test_build_labels_errors(small_fine):
    fs, manifest, _ = small_fine
    with pytest.raises(ValidationError):
        build_labels(fs, manifest, "3")
    with pytest.raises(ValidationError):
        build_labels(fs, manifest, "1", LabelConfig(k_candidates=()))
    short = DatasetManifest(manifest.image_ids[:3], manifest.class_ids[:3], manifest.labeled[:3])
    with pytest.raises(ValidationError):
        build_labels(fs, short)


def test_fully_occluded_dataset_is_degenerate():
    fs, manifest, _ = generate(preset("fine_grained", num_classes=4, old_classes=2,
                                      images_per_class=4, occlusion_prob=1.0, noise_sigma=0.0))
    with pytest.raises(DegenerateDataError):
        build_labels(fs, manifest)
