"""Named finite-difference checks on random float64 instances.

Each checker builds a random instance from ``seed``, evaluates the analytic
gradient and returns the worst relative error against central differences.
"""
import numpy as np

from . import losses as L
from .errors import ValidationError


def _unit(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _labels_with_pairs(rng, n, classes):
    """Integer labels in ``[0, classes)`` guaranteed to contain a repeated value."""
    lab = rng.integers(0, classes, n)
    lab[1] = lab[0]
    return rng.permutation(lab)


def _rep_unsup(rng, h):
    B, D = rng.integers(3, 9), rng.integers(3, 9)
    z, z2 = _unit(rng, B, D), _unit(rng, B, D)
    tau = 0.07
    _, gz, gz2 = L.rep_contrastive_unsup(z, z2, tau)
    return L.grad_check(lambda z, z2: L.rep_contrastive_unsup(z, z2, tau)[0],
                        {"z": z, "z2": z2}, {"z": gz, "z2": gz2}, h=h)


def _rep_sup(rng, h):
    B, D = rng.integers(4, 10), rng.integers(3, 9)
    z, lab = _unit(rng, B, D), _labels_with_pairs(rng, B, 3)
    _, gz, _ = L.rep_contrastive_sup(z, lab, 0.07)
    return L.grad_check(lambda z: L.rep_contrastive_sup(z, lab, 0.07)[0], {"z": z}, {"z": gz}, h=h)


def _cls_unsup(rng, h):
    B, K = rng.integers(2, 8), rng.integers(2, 7)
    s, s2 = rng.standard_normal((B, K)) * 3, rng.standard_normal((B, K)) * 3
    q, q2 = L.softmax(rng.standard_normal((B, K)) * 3), L.softmax(rng.standard_normal((B, K)) * 3)
    xi = rng.uniform(0.1, 2.0)
    _, g1, g2, _ = L.cls_loss_unsup(s, s2, q, q2, xi)
    return L.grad_check(lambda s, s2: L.cls_loss_unsup(s, s2, q, q2, xi)[0],
                        {"s": s, "s2": s2}, {"s": g1, "s2": g2}, h=h)


def _cls_sup(rng, h):
    B, K = rng.integers(2, 8), rng.integers(2, 7)
    s, lab = rng.standard_normal((B, K)) * 3, rng.integers(0, K, B)
    _, g, _ = L.cls_loss_sup(s, lab)
    return L.grad_check(lambda s: L.cls_loss_sup(s, lab)[0], {"s": s}, {"s": g}, h=h)


def _part_instance(rng):
    samples = rng.integers(4, 8)
    rows = []
    for i in range(samples):
        for p in np.flatnonzero(rng.random(3) < 0.7) + 1:
            rows.append((i, p))
    if len(rows) < 3:
        rows = [(0, 1), (1, 1), (2, 2)]
    sample, part = (np.array(c) for c in zip(*rows))
    cls = _labels_with_pairs(rng, samples, 2)
    return _unit(rng, sample.size, rng.integers(3, 7)), sample, part, cls


def _part_sup(rng, h):
    hh, sample, part, cls = _part_instance(rng)
    lab = np.where(rng.random(cls.size) < 0.8, cls, -1)[sample]
    _, g, _ = L.part_contrastive_sup(hh, sample, part, lab, 0.07)
    return L.grad_check(lambda h_: L.part_contrastive_sup(h_, sample, part, lab, 0.07)[0],
                        {"h_": hh}, {"h_": g}, h=h)


def _part_unsup(rng, h):
    hh, sample, part, cls = _part_instance(rng)
    conf = rng.uniform(0, 1, cls.size)[sample]
    _, g, _ = L.part_contrastive_unsup(hh, sample, part, cls[sample], conf, 0.2, 0.07)
    return L.grad_check(
        lambda h_: L.part_contrastive_unsup(h_, sample, part, cls[sample], conf, 0.2, 0.07)[0],
        {"h_": hh}, {"h_": g}, h=h)


def _model(rng, h, mode="parametric"):
    # imported lazily: training pulls in the whole stack
    from .config import RunConfig
    from .heads import HeadParams, l2_normalize
    from .training import Batch, _teacher, forward_backward

    B, N, d, K = 6, 9, 5, 3
    cfg = RunConfig(mode=mode, rep_dim=4, part_dim=4)
    params = HeadParams.init(d, K, 4, 4, seed=int(rng.integers(2**31)))
    params.adapter += 0.1 * rng.standard_normal((d, d))
    va = rng.standard_normal((B, N, d))
    vb = va + 0.3 * rng.standard_normal((B, N, d))
    lab = np.array([0, 0, 1, 1, -1, -1])
    batch = Batch(va, vb, lab, (rng.integers(0, 3, (B, N)),))
    oA = l2_normalize(va.mean(1) @ params.adapter)[0]
    oB = l2_normalize(vb.mean(1) @ params.adapter)[0]
    teacher = (_teacher(oA, params.prototypes, cfg.tau_t), _teacher(oB, params.prototypes, cfg.tau_t))
    pA = L.softmax(oA @ params.prototypes.T / cfg.tau_s)
    pseudo = [(pA.argmax(1), pA.max(1))]
    _, grads = forward_backward(params, batch, cfg, teacher, pseudo)
    arrays = dict(params.layout())

    def fn(**kw):
        p = type(params).from_layout(list(kw.items()))
        return forward_backward(p, batch, cfg, teacher, pseudo)[0].grand_total

    return L.grad_check(fn, arrays, dict(grads.layout()), h=h, max_entries=12,
                        seed=int(rng.integers(2**31)))


CHECKS = {
    "rep_unsup": _rep_unsup,
    "rep_sup": _rep_sup,
    "cls_unsup": _cls_unsup,
    "cls_sup": _cls_sup,
    "part_sup": _part_sup,
    "part_unsup": _part_unsup,
    "model": _model,
    "model_nonparametric": lambda rng, h: _model(rng, h, "nonparametric"),
}

LOSS_NAMES = tuple(k for k in CHECKS if not k.startswith("model"))


def check(name, seed=0, h=1e-5):
    """Worst relative error of loss ``name`` on the random instance for ``seed``."""
    if name not in CHECKS:
        raise ValidationError(f"unknown loss {name!r}; choose from {sorted(CHECKS)}")
    return CHECKS[name](np.random.default_rng([int(seed), list(CHECKS).index(name)]), h)
