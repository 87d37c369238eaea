"""Contrastive, self-distillation and part-correspondence losses.

Every loss returns its value together with analytic gradients with respect to
its direct inputs (embeddings or logits). Losses that can be empty for a batch
also return an ``empty`` flag; an empty loss has value 0 and zero gradient.
"""
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ValidationError


def _logsumexp_masked(S, mask):
    """Row-wise log-sum-exp over ``mask`` entries and the matching softmax weights."""
    neg = np.where(mask, S, -np.inf)
    m = neg.max(axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.where(mask, np.exp(neg - m), 0.0)
    tot = e.sum(axis=1, keepdims=True)
    safe = np.where(tot > 0, tot, 1.0)
    lse = (np.log(safe) + m)[:, 0]
    return lse, e / safe


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# representation losses


def rep_contrastive_unsup(z, z2, tau_r=0.07):
    """Cross-view InfoNCE whose denominator excludes the positive pair.

    Returns ``(loss, grad_z, grad_z2)``.
    """
    z = np.asarray(z, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    B = z.shape[0]
    if B < 2:
        raise ValidationError("rep_contrastive_unsup needs a batch of at least 2")
    S = z @ z2.T / tau_r
    off = ~np.eye(B, dtype=bool)
    lse, w = _logsumexp_masked(S, off)
    loss = float(np.mean(lse - np.diag(S)))
    G = w / B
    G[np.diag_indices(B)] = -1.0 / B
    return loss, G @ z2 / tau_r, G.T @ z / tau_r


def rep_contrastive_sup(z, labels, tau_r=0.07):
    """Supervised contrastive loss over anchors with a non-negative label.

    Entries with label -1 take part only as negatives. Returns
    ``(loss, grad_z, empty)``.
    """
    z = np.asarray(z, dtype=np.float64)
    labels = np.asarray(labels)
    n = z.shape[0]
    S = z @ z.T / tau_r
    off = ~np.eye(n, dtype=bool)
    pos = (labels[:, None] == labels[None, :]) & off & (labels[:, None] >= 0)
    npos = pos.sum(axis=1)
    anchors = npos > 0
    if not anchors.any():
        return 0.0, np.zeros_like(z), True
    lse, w = _logsumexp_masked(S, off)
    A = int(anchors.sum())
    per_anchor = lse - (np.where(pos, S, 0.0).sum(axis=1) / np.maximum(npos, 1))
    loss = float(per_anchor[anchors].sum() / A)
    G = np.where(anchors[:, None], w - pos / np.maximum(npos, 1)[:, None], 0.0) / A
    return loss, (G + G.T) @ z / tau_r, False


# ---------------------------------------------------------------------------
# parametric classifier


def classifier_logits(o, prototypes, tau_s=0.1):
    return o @ prototypes.T / tau_s


def classifier_probs(o, prototypes, tau_s=0.1):
    """Cosine-softmax over K prototypes; rows of the result sum to 1."""
    if tau_s <= 0:
        raise ValidationError("tau_s must be positive")
    return softmax(classifier_logits(o, prototypes, tau_s))


def entropy(p, eps=1e-12):
    return float(-(p * np.log(np.maximum(p, eps))).sum())


def cls_loss_unsup(logits, logits2, teacher_q, teacher_q2, xi=1.0):
    """Cross-view self-distillation with a mean-entropy regulariser.

    ``logits``/``logits2`` are student logits of the two views. Teacher
    distributions are constants: ``teacher_q2`` (from view 2) supervises view 1
    and ``teacher_q`` supervises view 2, and the two cross-entropies are
    averaged. The regulariser subtracts ``xi * H(mean prediction)`` over both
    views. Returns ``(loss, grad_logits, grad_logits2, mean_entropy)``.
    """
    B = logits.shape[0]
    p = softmax(logits)
    p2 = softmax(logits2)
    ce = -(teacher_q2 * log_softmax(logits)).sum(axis=1).mean()
    ce2 = -(teacher_q * log_softmax(logits2)).sum(axis=1).mean()
    pbar = (p.sum(axis=0) + p2.sum(axis=0)) / (2 * B)
    logp = np.log(np.maximum(pbar, 1e-300))
    H = float(-(pbar * logp).sum())
    loss = float(0.5 * (ce + ce2) - xi * H)
    # d(-xi H)/d pbar = xi (log pbar + 1)
    gbar = xi * (logp + 1.0) / (2 * B)

    def through_softmax(pr, g):
        return pr * (g - (pr * g).sum(axis=1, keepdims=True))

    g1 = 0.5 * (p * teacher_q2.sum(axis=1, keepdims=True) - teacher_q2) / B
    g2 = 0.5 * (p2 * teacher_q.sum(axis=1, keepdims=True) - teacher_q) / B
    g1 = g1 + through_softmax(p, np.broadcast_to(gbar, p.shape))
    g2 = g2 + through_softmax(p2, np.broadcast_to(gbar, p2.shape))
    return loss, g1, g2, H


def cls_loss_sup(logits, labels):
    """Mean cross-entropy against integer ``labels``. Returns ``(loss, grad, empty)``."""
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.size
    if n == 0:
        return 0.0, np.zeros_like(logits), True
    lp = log_softmax(logits)
    loss = float(-lp[np.arange(n), labels].mean())
    g = softmax(logits)
    g[np.arange(n), labels] -= 1.0
    return loss, g / n, False


def cls_loss_sup_probs(p, labels, eps=1e-300):
    """Cross-entropy evaluated directly on probabilities (no gradient)."""
    labels = np.asarray(labels, dtype=np.int64)
    return float(-np.log(np.maximum(p[np.arange(labels.size), labels], eps)).mean())


# ---------------------------------------------------------------------------
# part pooling and part-correspondence losses


def pool_parts(patch_features, part_labels):
    """Mean feature of every part id present (label 0 is background)."""
    x = np.asarray(patch_features, dtype=np.float64)
    lab = np.asarray(part_labels, dtype=np.int64)
    if not (lab > 0).any():
        return {}
    nseg = int(lab.max()) + 1
    sums, counts = kernels.segment_sum(x, np.where(lab > 0, lab, -1), nseg)
    return {int(c): sums[c] / counts[c] for c in np.flatnonzero(counts)}


def pool_parts_batch(patches, labels):
    """Pool a batch ``(B, N, d)`` by ``(B, N)`` labels.

    Returns ``(pooled (P, d), sample_index (P,), part_id (P,))`` ordered by
    sample then part id.
    """
    B, N, d = patches.shape
    lab = np.asarray(labels, dtype=np.int64)
    width = int(lab.max(initial=0)) + 1
    seg = np.where(lab > 0, np.arange(B)[:, None] * width + lab, -1).ravel()
    sums, counts = kernels.segment_sum(patches.reshape(B * N, d), seg, B * width)
    present = np.flatnonzero(counts)
    return sums[present] / counts[present, None], present // width, present % width


def _part_contrastive(h, sample, part, label, tau_r):
    h = np.asarray(h, dtype=np.float64)
    sample = np.asarray(sample)
    part = np.asarray(part)
    label = np.asarray(label)
    n = h.shape[0]
    if n == 0:
        return 0.0, np.zeros_like(h), True
    S = h @ h.T / tau_r
    eye = np.eye(n, dtype=bool)
    pos = ((label[:, None] == label[None, :]) & (label[:, None] >= 0)
           & (part[:, None] == part[None, :]) & (sample[:, None] != sample[None, :]))
    neg = ~pos & ~eye
    npos = pos.sum(axis=1)
    valid = (npos > 0) & neg.any(axis=1)
    if not valid.any():
        return 0.0, np.zeros_like(h), True
    # inner mean over valid parts of each sample, outer mean over samples
    samples, inv = np.unique(sample, return_inverse=True)
    parts_per_sample = np.bincount(inv, weights=valid, minlength=samples.size)
    n_samples = int((parts_per_sample > 0).sum())
    w_anchor = np.where(valid, 1.0 / np.maximum(parts_per_sample[inv], 1), 0.0) / n_samples
    lse, soft = _logsumexp_masked(S, neg & valid[:, None])
    pos_mean = np.where(pos, S, 0.0).sum(axis=1) / np.maximum(npos, 1)
    loss = float((w_anchor * np.where(valid, lse - pos_mean, 0.0)).sum())
    G = w_anchor[:, None] * (soft - pos / np.maximum(npos, 1)[:, None])
    return loss, (G + G.T) @ h / tau_r, False


def part_contrastive_sup(h, sample, part, class_label, tau_r=0.07):
    """Supervised part-correspondence loss.

    ``h`` holds one l2-normalised projected part feature per row, keyed by
    ``sample``, ``part`` and ``class_label`` (-1 for rows that may only act as
    negatives). Positives of an anchor share class and part with it and come
    from other samples; every other row except the anchor is a negative.
    Returns ``(loss, grad_h, empty)``.
    """
    return _part_contrastive(h, sample, part, class_label, tau_r)


def part_contrastive_unsup(h, sample, part, pseudo_labels, confidence, threshold=0.0,
                           tau_r=0.07, eligible=None):
    """Pseudo-label variant of :func:`part_contrastive_sup`.

    Rows whose confidence is below ``threshold`` (or with ``eligible`` False)
    neither anchor nor act as positives but stay in the negative pool.
    """
    pseudo = np.asarray(pseudo_labels, dtype=np.int64)
    keep = np.asarray(confidence) >= threshold
    if eligible is not None:
        keep &= np.asarray(eligible, dtype=bool)
    return _part_contrastive(h, sample, part, np.where(keep, pseudo, -1), tau_r)


# ---------------------------------------------------------------------------
# combination


@dataclass(frozen=True)
class LossReport:
    rep_unsup: float
    rep_sup: float
    rep_total: float
    cls_unsup: float
    cls_sup: float
    cls_total: float
    pc_sup: float
    pc_unsup: float
    pc_total: float
    gcd_total: float
    grand_total: float
    mean_entropy: float

    FIELDS = ("rep_unsup", "rep_sup", "rep_total", "cls_unsup", "cls_sup", "cls_total",
              "pc_sup", "pc_unsup", "pc_total", "gcd_total", "grand_total", "mean_entropy")

    def as_tuple(self):
        return tuple(getattr(self, f) for f in self.FIELDS)


def total_loss(components, lambda_b=0.35, mode="parametric"):
    """Combine component losses into a :class:`LossReport`.

    ``components`` maps rep_unsup, rep_sup, cls_unsup, cls_sup, pc_sup,
    pc_unsup and (optionally) mean_entropy to floats; missing entries are 0.
    """
    c = {k: float(components.get(k, 0.0)) for k in
         ("rep_unsup", "rep_sup", "cls_unsup", "cls_sup", "pc_sup", "pc_unsup", "mean_entropy")}
    rep = (1 - lambda_b) * c["rep_unsup"] + lambda_b * c["rep_sup"]
    cls = (1 - lambda_b) * c["cls_unsup"] + lambda_b * c["cls_sup"]
    if mode == "parametric":
        pc = (1 - lambda_b) * c["pc_unsup"] + lambda_b * c["pc_sup"]
        gcd = cls + rep
    elif mode == "nonparametric":
        pc = lambda_b * c["pc_sup"]
        gcd = rep
    else:
        raise ValidationError(f"mode must be parametric or nonparametric, got {mode!r}")
    return LossReport(c["rep_unsup"], c["rep_sup"], rep, c["cls_unsup"], c["cls_sup"], cls,
                      c["pc_sup"], c["pc_unsup"], pc, gcd, gcd + pc, c["mean_entropy"])


# ---------------------------------------------------------------------------
# finite-difference checking


def grad_check(fn, inputs, grads, h=1e-5, max_entries=None, seed=0, floor=1e-5):
    """Worst relative error between analytic ``grads`` and central differences of ``fn``.

    ``inputs``/``grads`` are dicts of arrays with matching keys; ``fn`` takes
    keyword arrays and returns a scalar. Relative error per entry is
    ``|a - n| / max(|a|, |n|, floor)``. ``max_entries`` samples entries per input.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for key, x in inputs.items():
        x = np.array(x, dtype=np.float64, copy=True)
        flat = x.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        ga = np.asarray(grads[key], dtype=np.float64).reshape(-1)
        args = dict(inputs)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            args[key] = x
            fp = fn(**args)
            flat[i] = old - h
            fm = fn(**args)
            flat[i] = old
            num = (fp - fm) / (2 * h)
            err = abs(ga[i] - num) / max(abs(ga[i]), abs(num), floor)
            worst = max(worst, err)
    return worst
