"""Joint training of the adapter, heads and prototypes with SGD.

Per image the model sees patch tokens ``x`` (N x d). Two augmented views are
mean-pooled into global tokens ``g`` and mapped through the shared adapter
``W``:

* representation branch ``z = normalize(psi(g W))``
* classifier branch ``o = normalize(g W)``, logits ``o L^T / tau_s``
* part branch, per active label level, ``h = normalize(psi_p(f W))`` where
  ``f`` are part features pooled from view A under that level's labels.
"""
from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from .config import RunConfig
from .errors import NumericalAbort, ValidationError
from .evaluation import clustering_accuracy
from .heads import HeadParams, l2_normalize, l2_normalize_backward, mlp_backward, mlp_forward
from .numerics import cosine_lr, kmeans


def augment_views(features, strength, seed, epoch=0, sample_ids=None, std=None, drop_rate=0.1):
    """Two views per sample: Gaussian noise ``strength * std`` per dimension
    plus independent patch dropout (dropped tokens replaced by the image mean).

    With ``strength == 0`` both views equal the input. Each sample draws from
    its own generator keyed by ``(seed, epoch, sample_id)``, so views do not
    depend on batch composition.
    """
    x = np.asarray(features, dtype=np.float64)
    if strength == 0:
        return x.copy(), x.copy()
    B, N, d = x.shape
    if sample_ids is None:
        sample_ids = np.arange(B)
    if std is None:
        std = x.reshape(-1, d).std(axis=0)
    sigma = strength * np.asarray(std, dtype=np.float64)
    out_a = np.empty_like(x)
    out_b = np.empty_like(x)
    for b in range(B):
        rng = np.random.default_rng([int(seed), int(epoch), int(sample_ids[b])])
        mean = x[b].mean(axis=0)
        for out in (out_a, out_b):
            v = x[b] + sigma * rng.standard_normal((N, d))
            drop = rng.random(N) < drop_rate
            v[drop] = mean
            out[b] = v
    return out_a, out_b


@dataclass
class Batch:
    view_a: np.ndarray  # (B, N, d)
    view_b: np.ndarray
    class_labels: np.ndarray  # (B,) class id for labelled samples, -1 otherwise
    part_labels: tuple = ()  # one (B, N) label map per active level


def _teacher(o, prototypes, tau_t):
    return L.softmax(o @ prototypes.T / tau_t)


def forward_backward(params, batch, cfg, teacher=None, pseudo=None):
    """Loss report and parameter gradients of ``grand_total`` for one batch.

    ``teacher`` ((qA, qB)) and ``pseudo`` (list of (labels, confidence) per
    level) override the internally computed stop-gradient targets; finite
    difference checks pass them to freeze those targets.
    """
    mode = cfg.mode
    lam = cfg.lambda_b
    W = params.adapter
    grads = params.zeros_like()
    lab = np.asarray(batch.class_labels, dtype=np.int64)
    li = np.flatnonzero(lab >= 0)
    nl = li.size

    gA = batch.view_a.mean(axis=1)
    gB = batch.view_b.mean(axis=1)
    xA, xB = gA @ W, gB @ W
    comps = {}

    # representation
    yA, cA = mlp_forward(params.psi, xA)
    yB, cB = mlp_forward(params.psi, xB)
    zA, rA = l2_normalize(yA)
    zB, rB = l2_normalize(yB)
    comps["rep_unsup"], gzA, gzB = L.rep_contrastive_unsup(zA, zB, cfg.tau_r)
    gzA, gzB = (1 - lam) * gzA, (1 - lam) * gzB
    rs, gzl, _ = L.rep_contrastive_sup(np.concatenate([zA[li], zB[li]]),
                                       np.concatenate([lab[li], lab[li]]), cfg.tau_r)
    comps["rep_sup"] = rs
    gzA[li] += lam * gzl[:nl]
    gzB[li] += lam * gzl[nl:]
    gpA, gxA = mlp_backward(params.psi, cA, l2_normalize_backward(gzA, zA, rA))
    gpB, gxB = mlp_backward(params.psi, cB, l2_normalize_backward(gzB, zB, rB))
    for k in grads.psi:
        grads.psi[k] = gpA[k] + gpB[k]

    # classifier
    protos = params.prototypes
    oA, roA = l2_normalize(xA)
    oB, roB = l2_normalize(xB)
    sA = oA @ protos.T / cfg.tau_s
    pA = L.softmax(sA)
    if mode == "parametric":
        sB = oB @ protos.T / cfg.tau_s
        qA, qB = teacher if teacher is not None else (_teacher(oA, protos, cfg.tau_t),
                                                      _teacher(oB, protos, cfg.tau_t))
        cu, gsA, gsB, H = L.cls_loss_unsup(sA, sB, qA, qB, cfg.xi)
        comps["cls_unsup"], comps["mean_entropy"] = cu, H
        gsA, gsB = (1 - lam) * gsA, (1 - lam) * gsB
        cs, gsl, _ = L.cls_loss_sup(np.concatenate([sA[li], sB[li]]),
                                    np.concatenate([lab[li], lab[li]]))
        comps["cls_sup"] = cs
        gsA[li] += lam * gsl[:nl]
        gsB[li] += lam * gsl[nl:]
        grads.prototypes = (gsA.T @ oA + gsB.T @ oB) / cfg.tau_s
        gxA += l2_normalize_backward(gsA @ protos / cfg.tau_s, oA, roA)
        gxB += l2_normalize_backward(gsB @ protos / cfg.tau_s, oB, roB)

    gW = gA.T @ gxA + gB.T @ gxB

    # part correspondence
    pc_sup = pc_unsup = 0.0
    for lvl, part_map in enumerate(batch.part_labels):
        f, smp, prt = L.pool_parts_batch(batch.view_a, part_map)
        if f.shape[0] == 0:
            continue
        xf = f @ W
        yf, cf = mlp_forward(params.psi_p, xf)
        h, rh = l2_normalize(yf)
        ls, gh, _ = L.part_contrastive_sup(h, smp, prt, lab[smp], cfg.tau_r)
        pc_sup += ls
        gh = lam * gh
        if mode == "parametric":
            if pseudo is not None:
                plab, conf = pseudo[lvl]
            else:
                plab, conf = pA.argmax(axis=1), pA.max(axis=1)
            lu, ghu, _ = L.part_contrastive_unsup(h, smp, prt, plab[smp], conf[smp],
                                                  cfg.pc_threshold, cfg.tau_r,
                                                  eligible=lab[smp] < 0)
            pc_unsup += lu
            gh = gh + (1 - lam) * ghu
        gpp, gxf = mlp_backward(params.psi_p, cf, l2_normalize_backward(gh, h, rh))
        for k in grads.psi_p:
            grads.psi_p[k] += gpp[k]
        gW += f.T @ gxf
    comps["pc_sup"], comps["pc_unsup"] = pc_sup, pc_unsup
    grads.adapter = gW
    return L.total_loss(comps, lam, mode), grads


def _level_maps(store, order):
    if order == "off" or store is None:
        if order != "off":
            raise ValidationError(f"order={order} needs part labels")
        return ()
    wanted = {"1": (1,), "2": (2,), "both": (1, 2)}[order]
    try:
        return tuple(store.level(n).labels for n in wanted)
    except KeyError as exc:
        raise ValidationError(f"part labels lack a level required by order={order}: {exc}") from None


def _mean_report(reports, cfg):
    keys = ("rep_unsup", "rep_sup", "cls_unsup", "cls_sup", "pc_sup", "pc_unsup", "mean_entropy")
    comps = {k: float(np.mean([getattr(r, k) for r in reports])) for k in keys}
    return L.total_loss(comps, cfg.lambda_b, cfg.mode)


@dataclass
class TrainResult:
    params: HeadParams
    history: list  # one LossReport per epoch (component means)
    batch_history: list  # LossReport per optimizer step
    checkpoints: list = field(default_factory=list)  # (epoch, HeadParams)
    evaluations: list = field(default_factory=list)  # (epoch, AccReport)


def train(fs, manifest, store, cfg=None, eval_fn=None, on_checkpoint=None):
    """Train heads on ``fs``; returns a :class:`TrainResult`.

    ``eval_fn(params)`` is called every ``cfg.eval_every`` epochs (and after
    the last one) when given; ``on_checkpoint(epoch, params)`` every
    ``cfg.checkpoint_every`` epochs.
    """
    cfg = (cfg or RunConfig()).validate()
    M, N, d = fs.data.shape
    if manifest.class_ids.size != M:
        raise ValidationError(f"manifest lists {manifest.class_ids.size} images, features hold {M}")
    maps = _level_maps(store, cfg.order)
    for m in maps:
        if m.shape != (M, N):
            raise ValidationError(f"part labels have shape {m.shape}, features need {(M, N)}")
    K = cfg.num_classes or manifest.num_classes
    if K < manifest.num_old:
        raise ValidationError(f"num_classes={K} below the {manifest.num_old} labelled classes")
    params = HeadParams.init(d, K, cfg.rep_dim, cfg.part_dim, seed=cfg.seed)
    velocity = params.zeros_like()
    # labelled classes keep their ids only if they fit in K
    class_lab = np.where(manifest.labeled, manifest.class_ids, -1).astype(np.int64)
    old = np.array(sorted(manifest.old_classes), dtype=np.int64)
    remap = {int(c): i for i, c in enumerate(old)}
    class_lab = np.array([remap.get(int(c), -1) if c >= 0 else -1 for c in class_lab])
    std = fs.data.reshape(-1, d).std(axis=0)

    result = TrainResult(params, [], [])
    step = 0
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr0, cfg.lr_min)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(M)
        reports = []
        for start in range(0, M, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if idx.size < 2:
                continue
            va, vb = augment_views(fs.data[idx], cfg.aug_strength, cfg.seed, epoch, idx, std,
                                   cfg.drop_rate)
            batch = Batch(va, vb, class_lab[idx], tuple(m[idx] for m in maps))
            report, grads = forward_backward(params, batch, cfg)
            _check_finite(report, step)
            _sgd_step(params, grads, velocity, lr, cfg)
            if not params.all_finite():
                raise NumericalAbort("parameters", step)
            reports.append(report)
            result.batch_history.append(report)
            step += 1
        if reports:
            result.history.append(_mean_report(reports, cfg))
        done = epoch + 1
        if cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
            result.checkpoints.append((done, params.copy()))
            if on_checkpoint is not None:
                on_checkpoint(done, params)
        if eval_fn is not None and ((cfg.eval_every and done % cfg.eval_every == 0)
                                    or done == cfg.epochs):
            result.evaluations.append((done, eval_fn(params)))
    return result


def _check_finite(report, step):
    for name in L.LossReport.FIELDS:
        if not np.isfinite(getattr(report, name)):
            raise NumericalAbort(name, step)


def _sgd_step(params, grads, velocity, lr, cfg):
    for (_, p), (_, g), (_, v) in zip(params.layout(), grads.layout(), velocity.layout()):
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p
        v *= cfg.momentum
        v += g
        p -= lr * v
    params.prototypes[...] = l2_normalize(params.prototypes)[0]


def embed(params, fs):
    """Classifier-space global embeddings ``normalize(mean(x) W)`` for every image."""
    return l2_normalize(fs.data.mean(axis=1) @ params.adapter)[0]


def represent(params, fs):
    """Representation-head outputs ``normalize(psi(mean(x) W))`` for every image."""
    y, _ = mlp_forward(params.psi, fs.data.mean(axis=1) @ params.adapter)
    return l2_normalize(y)[0]


def assign_clusters(params, fs, mode="parametric", num_clusters=None, seed=0, tau_s=0.1):
    """Cluster id per image: prototype-classifier argmax (parametric) or seeded
    k-means with ``num_clusters`` (default K) on representation outputs."""
    if mode == "parametric":
        return (embed(params, fs) @ params.prototypes.T / tau_s).argmax(axis=1)
    if mode == "nonparametric":
        k = num_clusters or params.num_classes
        return kmeans(represent(params, fs), k, seed=seed).assignments
    raise ValidationError(f"mode must be parametric or nonparametric, got {mode!r}")


def evaluate(params, fs, manifest, mode="parametric", seed=0, tau_s=0.1, num_clusters=None):
    """Clustering accuracy on the unlabelled images."""
    pred = assign_clusters(params, fs, mode, num_clusters or manifest.num_classes, seed, tau_s)
    un = ~np.asarray(manifest.labeled, dtype=bool)
    return clustering_accuracy(pred[un], manifest.class_ids[un], manifest.old_classes)
