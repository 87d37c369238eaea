import numpy as np
import pytest

from partco.config import RunConfig
from partco.errors import FormatError, NumericalAbort, ValidationError
from partco.heads import HeadParams, load_checkpoint, save_checkpoint
from partco.partlabels import build_labels
from partco.training import assign_clusters, augment_views, embed, evaluate, train

QUICK = RunConfig(epochs=2, batch_size=16, rep_dim=16, part_dim=16)


@pytest.fixture(scope="module")
def labelled(small_fine):
    fs, manifest, truth = small_fine
    return fs, manifest, build_labels(fs, manifest, "both", seed=0)


def test_augment_identity_and_determinism(rng):
    x = rng.standard_normal((3, 4, 5))
    a, b = augment_views(x, 0.0, seed=1)
    assert np.array_equal(a, x) and np.array_equal(b, x)
    a1, b1 = augment_views(x, 0.5, seed=1, epoch=2)
    a2, b2 = augment_views(x, 0.5, seed=1, epoch=2)
    assert np.array_equal(a1, a2) and np.array_equal(b1, b2)
    assert not np.array_equal(a1, b1)


def test_augment_views_independent_of_batch_composition(rng):
    x = rng.standard_normal((4, 4, 3))
    full, _ = augment_views(x, 0.5, seed=3, sample_ids=np.arange(4), std=np.ones(3))
    part, _ = augment_views(x[2:], 0.5, seed=3, sample_ids=np.arange(2, 4), std=np.ones(3))
    assert np.array_equal(full[2:], part)


def test_augment_noise_moment():
    x = np.random.default_rng(0).standard_normal((40, 256, 4)) * np.array([1.0, 2.0, 0.5, 3.0])
    std = x.reshape(-1, 4).std(0)
    a, _ = augment_views(x, 0.5, seed=0, std=std, drop_rate=0.0)
    got = (a - x).reshape(-1, 4).std(0)
    assert np.all(np.abs(got / (0.5 * std) - 1) < 0.1)


def test_zero_epochs_returns_initial_params(labelled):
    fs, manifest, store = labelled
    cfg = QUICK.replace(epochs=0)
    res = train(fs, manifest, store, cfg)
    init = HeadParams.init(fs.dim, manifest.num_classes, 16, 16, seed=cfg.seed)
    for (_, a), (_, b) in zip(res.params.layout(), init.layout()):
        assert np.array_equal(a, b)
    assert res.history == []


@pytest.mark.parametrize("mode,order", [("parametric", "1"), ("parametric", "both"),
                                        ("nonparametric", "2"), ("parametric", "off")])
def test_training_is_deterministic_and_reports_hold(labelled, mode, order):
    fs, manifest, store = labelled
    cfg = QUICK.replace(mode=mode, order=order)
    a = train(fs, manifest, store, cfg)
    b = train(fs, manifest, store, cfg)
    assert [r.as_tuple() for r in a.batch_history] == [r.as_tuple() for r in b.batch_history]
    lam = cfg.lambda_b
    for r in a.batch_history:
        assert r.rep_total == (1 - lam) * r.rep_unsup + lam * r.rep_sup
        assert r.grand_total == r.gcd_total + r.pc_total
        if order == "off":
            assert r.pc_total == 0.0
    assert np.allclose(np.linalg.norm(a.params.prototypes, axis=1), 1.0)
    assert len(a.history) == cfg.epochs


def test_train_validation(labelled):
    fs, manifest, store = labelled
    with pytest.raises(ValidationError):
        train(fs, manifest, None, QUICK.replace(order="1"))
    with pytest.raises(ValidationError):
        train(fs, manifest, build_labels(fs, manifest, "1"), QUICK.replace(order="2"))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_aborts_with_component_named(labelled):
    fs, manifest, store = labelled
    with pytest.raises(NumericalAbort) as info:
        train(fs, manifest, store, QUICK.replace(lr0=1e300, lr_min=0.0, epochs=3))
    assert info.value.exit_code == 3
    assert "non-finite" in str(info.value)


def test_eval_hooks_and_checkpoints(labelled):
    fs, manifest, store = labelled
    seen = []
    res = train(fs, manifest, store, QUICK.replace(epochs=4, eval_every=2, checkpoint_every=2),
                eval_fn=lambda p: evaluate(p, fs, manifest),
                on_checkpoint=lambda e, p: seen.append(e))
    assert [e for e, _ in res.evaluations] == [2, 4]
    assert [e for e, _ in res.checkpoints] == [2, 4] == seen


def test_assign_clusters_parametric_is_argmax(labelled):
    fs, manifest, _ = labelled
    p = HeadParams.init(fs.dim, 5, 8, 8, seed=0)
    o = embed(p, fs)
    assert np.array_equal(assign_clusters(p, fs, "parametric", tau_s=0.1),
                          np.argmax(o @ p.prototypes.T, axis=1))
    a = assign_clusters(p, fs, "nonparametric", num_clusters=3, seed=1)
    assert np.array_equal(a, assign_clusters(p, fs, "nonparametric", num_clusters=3, seed=1))
    assert set(a.tolist()) <= {0, 1, 2}


def test_sample_at_prototype_is_assigned_to_it():
    p = HeadParams.init(3, 3, 4, 4, seed=0)
    p.prototypes = np.eye(3)
    from partco.features import FeatureSet
    fs = FeatureSet(np.tile(np.array([0.0, 1.0, 0.0]), (1, 4, 1)))
    assert assign_clusters(p, fs, "parametric", tau_s=1.0).tolist() == [1]


def test_checkpoint_round_trip_and_corruption(tmp_path):
    p = HeadParams.init(4, 3, 8, 8, seed=2)
    path = tmp_path / "c.pckp"
    save_checkpoint(p, path, meta="epochs=1\n")
    q, meta = load_checkpoint(path)
    assert meta == "epochs=1\n"
    for (na, a), (nb, b) in zip(p.layout(), q.layout()):
        assert na == nb and np.array_equal(a, b)
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(FormatError):
        load_checkpoint(path)
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        load_checkpoint(path)
