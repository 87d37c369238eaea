import numpy as np
import pytest

from partco import gradcheck
from partco import losses as L
from partco.errors import ValidationError


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


# -- representation ----------------------------------------------------------


def test_rep_unsup_identical_vectors_gives_log_b_minus_1():
    z = np.tile(unit([1.0, 2.0, 0.5]), (4, 1))
    assert L.rep_contrastive_unsup(z, z, 0.3)[0] == pytest.approx(np.log(3))


def test_rep_unsup_hand_example():
    z = np.array([[1.0, 0.0], [-1.0, 0.0]])
    assert L.rep_contrastive_unsup(z, z.copy(), 1.0)[0] == pytest.approx(-2.0)


def test_rep_unsup_batch_of_one_is_an_error():
    with pytest.raises(ValidationError):
        L.rep_contrastive_unsup(np.ones((1, 2)), np.ones((1, 2)), 0.1)


def test_rep_sup_examples():
    z = np.tile(unit([1.0, 1.0]), (2, 1))
    loss, _, empty = L.rep_contrastive_sup(z, np.array([3, 3]), 0.1)
    assert loss == pytest.approx(0.0, abs=1e-12) and not empty
    loss, g, empty = L.rep_contrastive_sup(unit(np.eye(3)), np.array([0, 1, 2]), 0.1)
    assert empty and loss == 0.0 and not g.any()


# -- classifier --------------------------------------------------------------


def test_classifier_probs_examples():
    p = L.classifier_probs(np.array([[1.0, 0.0]]), np.eye(2), 1.0)
    assert p[0] == pytest.approx([np.e / (np.e + 1), 1 / (np.e + 1)])
    p = L.classifier_probs(np.array([[0.0, 0.0, 1.0]]), np.eye(3)[:2], 0.5)
    assert p[0] == pytest.approx([0.5, 0.5])
    o = unit([[0.9, 0.3, 0.1]])
    tops = [L.classifier_probs(o, np.eye(3), t).max() for t in (1.0, 0.1, 0.01)]
    assert tops[0] < tops[1] < tops[2] <= 1.0


def test_cls_unsup_uniform_case():
    K, xi = 4, 0.7
    s = np.zeros((3, K))
    q = np.full((3, K), 1 / K)
    loss, _, _, H = L.cls_loss_unsup(s, s, q, q, xi)
    assert H == pytest.approx(np.log(K))
    assert loss == pytest.approx((1 - xi) * np.log(K))


def test_cls_sup_examples():
    big = np.array([[50.0, 0, 0]])
    assert L.cls_loss_sup(big, np.array([0]))[0] == pytest.approx(0.0, abs=1e-12)
    assert L.cls_loss_sup(np.zeros((2, 10)), np.array([1, 7]))[0] == pytest.approx(np.log(10))
    loss, g, empty = L.cls_loss_sup(np.zeros((0, 3)), np.array([], dtype=int))
    assert empty and loss == 0.0


# -- part pooling and part contrast -----------------------------------------


def test_pool_parts_definition():
    a, b, c, bg = np.eye(4)
    pooled = L.pool_parts(np.stack([a, b, c, bg]), np.array([1, 1, 2, 0]))
    assert set(pooled) == {1, 2}
    assert np.allclose(pooled[1], (a + b) / 2) and np.allclose(pooled[2], c)
    assert L.pool_parts(np.ones((3, 2)), np.zeros(3, int)) == {}


def test_pool_parts_batch_matches_brute_force(rng):
    x = rng.standard_normal((3, 9, 4))
    lab = rng.integers(0, 4, (3, 9))
    f, smp, prt = L.pool_parts_batch(x, lab)
    for row, (i, p) in enumerate(zip(smp, prt)):
        assert np.allclose(f[row], x[i][lab[i] == p].mean(0))
    assert len(f) == sum(len(set(r[r > 0].tolist())) for r in lab)


def test_part_sup_hand_example():
    # anchor and positive identical, three orthogonal negatives, tau 1
    h = np.array([[1.0, 0, 0, 0], [1.0, 0, 0, 0], [0, 1.0, 0, 0], [0, 0, 1.0, 0], [0, 0, 0, 1.0]])
    sample = np.array([0, 1, 2, 3, 4])
    part = np.array([1, 1, 1, 2, 2])
    cls = np.array([0, 0, -1, -1, -1])
    loss, _, empty = L.part_contrastive_sup(h, sample, part, cls, 1.0)
    # anchors 0 and 1: negatives are the three other rows, similarity 0
    assert not empty
    assert loss == pytest.approx(-1 + np.log(3))


def test_part_sup_identical_features_gives_log_n_neg():
    n = 5
    h = np.tile(unit([1.0, 2.0]), (n, 1))
    sample = np.arange(n)
    part = np.array([1, 1, 2, 2, 2])
    cls = np.array([0, 0, -1, -1, -1])
    # anchors 0,1 each have 1 positive and 3 negatives
    assert L.part_contrastive_sup(h, sample, part, cls, 0.5)[0] == pytest.approx(np.log(3))


def test_part_unsup_matches_sup_with_oracle_labels(rng):
    h = unit(rng.standard_normal((12, 4)))
    sample = np.repeat(np.arange(6), 2)
    part = np.tile([1, 2], 6)
    cls = rng.integers(0, 2, 6)[sample]
    sup = L.part_contrastive_sup(h, sample, part, cls, 0.1)[0]
    unsup = L.part_contrastive_unsup(h, sample, part, cls, np.ones(12), 0.0, 0.1)[0]
    assert unsup == pytest.approx(sup, abs=1e-12)


def test_part_unsup_distinct_pseudo_labels_is_empty(rng):
    h = unit(rng.standard_normal((4, 3)))
    loss, g, empty = L.part_contrastive_unsup(h, np.arange(4), np.ones(4, int), np.arange(4),
                                              np.ones(4))
    assert empty and loss == 0.0


def test_losses_are_permutation_invariant(rng):
    h = unit(rng.standard_normal((10, 4)))
    sample = np.repeat(np.arange(5), 2)
    part = np.tile([1, 2], 5)
    cls = np.array([0, 0, 1, 1, 0])[sample]
    perm = rng.permutation(10)
    a = L.part_contrastive_sup(h, sample, part, cls, 0.1)[0]
    b = L.part_contrastive_sup(h[perm], sample[perm], part[perm], cls[perm], 0.1)[0]
    assert a == pytest.approx(b, abs=1e-12)
    z, z2 = unit(rng.standard_normal((6, 3))), unit(rng.standard_normal((6, 3)))
    p = rng.permutation(6)
    assert L.rep_contrastive_unsup(z, z2, 0.1)[0] == pytest.approx(
        L.rep_contrastive_unsup(z[p], z2[p], 0.1)[0], abs=1e-12)


# -- combination -------------------------------------------------------------


def test_total_loss_identities():
    c = dict(rep_unsup=1.0, rep_sup=2.0, cls_unsup=3.0, cls_sup=4.0, pc_sup=5.0, pc_unsup=6.0)
    r = L.total_loss(c, 0.35, "parametric")
    assert r.rep_total == 0.65 * 1.0 + 0.35 * 2.0
    assert r.pc_total == 0.65 * 6.0 + 0.35 * 5.0
    assert r.grand_total == r.gcd_total + r.pc_total
    n = L.total_loss(c, 0.35, "nonparametric")
    assert n.gcd_total == n.rep_total and n.pc_total == 0.35 * 5.0
    assert L.total_loss(c, 1.0, "parametric").pc_total == 5.0
    z = L.total_loss(dict(rep_unsup=1.0), 0.35)
    assert z.grand_total == z.gcd_total
    with pytest.raises(ValidationError):
        L.total_loss(c, 0.35, "other")


# -- finite differences ------------------------------------------------------


@pytest.mark.parametrize("name", list(gradcheck.CHECKS))
def test_gradients_match_finite_differences(name):
    n = 3 if name.startswith("model") else 10
    assert max(gradcheck.check(name, seed=s) for s in range(n)) < 1e-4


def test_grad_check_exact_on_linear_probe():
    w = np.array([1.5, -2.0, 0.25])
    err = L.grad_check(lambda x: float(w @ x), {"x": np.ones(3)}, {"x": w})
    assert err < 1e-9


def test_grad_check_detects_corrupted_gradient(rng):
    z, z2 = unit(rng.standard_normal((5, 3))), unit(rng.standard_normal((5, 3)))
    _, gz, gz2 = L.rep_contrastive_unsup(z, z2, 0.1)
    gz = gz.copy()
    gz[0, 0] += 0.5
    err = L.grad_check(lambda z, z2: L.rep_contrastive_unsup(z, z2, 0.1)[0],
                       {"z": z, "z2": z2}, {"z": gz, "z2": gz2})
    assert err > 1e-2
