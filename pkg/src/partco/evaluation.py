"""Hungarian-matched clustering accuracy and part-label agreement."""
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .numerics import Assignment, hungarian_max


@dataclass(frozen=True)
class AccReport:
    acc_all: float
    acc_old: float
    acc_new: float
    matching: Assignment
    n_all: int
    n_old: int
    n_new: int
    cluster_ids: np.ndarray  # row labels of the contingency matrix
    class_ids: np.ndarray  # column labels

    def mapped(self, cluster):
        """Class id the joint matching assigns to a predicted cluster id (or None)."""
        where = np.flatnonzero(self.cluster_ids == cluster)
        if not where.size:
            return None
        col = self.matching.permutation[where[0]]
        return int(self.class_ids[col]) if col < self.class_ids.size else None


def contingency(pred, truth):
    """Square count matrix rows=predicted ids, cols=true ids, zero-padded."""
    rows, pi = np.unique(pred, return_inverse=True)
    cols, ti = np.unique(truth, return_inverse=True)
    K = max(rows.size, cols.size)
    C = np.zeros((K, K))
    np.add.at(C, (pi.ravel(), ti.ravel()), 1.0)
    return C, rows, cols


def clustering_accuracy(pred, truth, old_classes):
    """One joint matching over all samples, then All/Old/New accuracies under it."""
    pred = np.asarray(pred).ravel()
    truth = np.asarray(truth).ravel()
    if pred.shape != truth.shape:
        raise ValidationError(f"pred has {pred.size} entries, truth has {truth.size}")
    if pred.size == 0:
        raise ValidationError("no samples to evaluate")
    C, rows, cols = contingency(pred, truth)
    match = hungarian_max(C)
    mapping = np.full(rows.size, -10**9, dtype=np.int64)
    for r in range(rows.size):
        c = match.permutation[r]
        if c < cols.size:
            mapping[r] = cols[c]
    pi = np.searchsorted(rows, pred)
    correct = mapping[pi] == truth
    old = np.isin(truth, np.fromiter(old_classes, dtype=np.int64, count=len(old_classes)))
    n_old = int(old.sum())
    n_new = int((~old).sum())
    acc_old = float(correct[old].mean()) if n_old else 0.0
    acc_new = float(correct[~old].mean()) if n_new else 0.0
    return AccReport(float(correct.mean()), acc_old, acc_new, match, pred.size, n_old, n_new,
                     rows, cols)


def part_label_agreement(pred_parts, planted_parts):
    """Hungarian-matched per-patch agreement over planted foreground patches.

    Predicted background (0) never matches a planted part.
    """
    pred = np.asarray(pred_parts)
    plant = np.asarray(planted_parts)
    if pred.shape != plant.shape:
        raise ValidationError(f"shape mismatch {pred.shape} vs {plant.shape}")
    fg = plant > 0
    if not fg.any():
        raise ValidationError("planted map has no foreground")
    p = pred[fg]
    t = plant[fg]
    C, rows, _ = contingency(p, t)
    C[: rows.size][rows == 0] = 0.0
    match = hungarian_max(C)
    return match.total_profit / t.size
