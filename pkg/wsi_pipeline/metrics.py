"""
Evaluation formulas: AUC, confusion-derived rates and Dice similarity.
"""
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import rankdata
from sklearn.metrics import roc_curve

from .exceptions import DivisionUndefined, LengthMismatch, NegativeCount, OneClassOnly, ShapeMismatch


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise NegativeCount("confusion counts must be non-negative")

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn


def _split_by_label(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise LengthMismatch(f"{scores.size} scores vs {labels.size} labels")
    positives = scores[labels == 1]
    negatives = scores[labels == 0]
    if positives.size == 0 or negatives.size == 0:
        raise OneClassOnly("AUC needs at least one positive and one negative instance")
    return positives, negatives


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """P(X1 > X0) by exhaustive pair counting, ties counting one half."""
    positives, negatives = _split_by_label(scores, labels)
    greater = np.count_nonzero(positives[:, None] > negatives[None, :])
    ties = np.count_nonzero(positives[:, None] == negatives[None, :])
    return (greater + 0.5 * ties) / (positives.size * negatives.size)


def auc_ranked(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney U from average ranks; agrees with `auc` including ties."""
    positives, negatives = _split_by_label(scores, labels)
    ranks = rankdata(np.concatenate([positives, negatives]))
    n_pos = positives.size
    u = ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2
    return u / (n_pos * negatives.size)


def roc_points(scores: Sequence[float], labels: Sequence[int]):
    """(fpr, tpr, threshold) triples for plotting."""
    _split_by_label(scores, labels)
    fpr, tpr, thresholds = roc_curve(np.asarray(labels), np.asarray(scores, dtype=np.float64))
    return list(zip(fpr.tolist(), tpr.tolist(), thresholds.tolist()))


def confusion(preds: Sequence[int], labels: Sequence[int]) -> ConfusionCounts:
    if len(preds) != len(labels):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(labels)} labels")
    preds = np.asarray(preds).astype(bool)
    labels = np.asarray(labels).astype(bool)
    return ConfusionCounts(
        tp=int(np.count_nonzero(preds & labels)),
        fp=int(np.count_nonzero(preds & ~labels)),
        tn=int(np.count_nonzero(~preds & ~labels)),
        fn=int(np.count_nonzero(~preds & labels)),
    )


def _ratio(numerator, denominator, name):
    if denominator <= 0:
        raise DivisionUndefined(f"{name} is undefined for an empty denominator")
    return numerator / denominator


def accuracy(c: ConfusionCounts) -> float:
    return _ratio(c.tp + c.tn, c.total, 'accuracy')


def recall(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fn, 'recall')


def precision(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fp, 'precision')


def specificity(c: ConfusionCounts) -> float:
    return _ratio(c.tn, c.tn + c.fp, 'specificity')


def dice(mask_a: np.ndarray, mask_b: np.ndarray) -> float:
    """2|A n B| / (|A| + |B|); two empty masks agree perfectly."""
    a = np.asarray(mask_a).astype(bool)
    b = np.asarray(mask_b).astype(bool)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mask shapes {a.shape} and {b.shape} differ")
    total = np.count_nonzero(a) + np.count_nonzero(b)
    if total == 0:
        return 1.0
    return 2 * np.count_nonzero(a & b) / total


def rates_report(c: ConfusionCounts) -> dict:
    """Every rate that is defined for these counts."""
    report = {'tp': c.tp, 'fp': c.fp, 'tn': c.tn, 'fn': c.fn}
    for name, fn in (('accuracy', accuracy), ('recall', recall), ('precision', precision), ('specificity', specificity)):
        try:
            report[name] = fn(c)
        except DivisionUndefined:
            report[name] = None
    return report
