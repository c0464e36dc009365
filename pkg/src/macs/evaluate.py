"""Fragment metrics and subject-level ensembling with a Youden-J threshold.

The J threshold is fit on the very scores it then classifies, as in the original
evaluation protocol.  Subject-level numbers are therefore optimistic.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

logger = logging.getLogger(__name__)


@dataclass
class MetricReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int
    flags: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return asdict(self)


def fragment_metrics(predictions, truth) -> MetricReport:
    """Binary metrics with class 1 as the positive class."""
    pred = np.asarray(predictions).astype(np.int64)
    true = np.asarray(truth).astype(np.int64)
    if pred.shape != true.shape:
        raise ValueError("predictions and labels differ in length")
    if pred.size == 0:
        raise ValueError("empty evaluation set")
    tp = int(((pred == 1) & (true == 1)).sum())
    fp = int(((pred == 1) & (true == 0)).sum())
    tn = int(((pred == 0) & (true == 0)).sum())
    fn = int(((pred == 0) & (true == 1)).sum())
    flags = []
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0:
        f1 = 0.0
        flags.append("f1_undefined")
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return MetricReport((tp + tn) / pred.size, precision, recall, f1, tp, fp, tn, fn, flags)


def youden_threshold(scores, labels) -> tuple[float, float]:
    """Threshold t maximizing sensitivity + specificity - 1 for the rule ``score >= t``.

    Only observed scores (plus +inf) need checking: the rule changes only at those
    points.  Ties go to the lowest threshold.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    pos, neg = (labels == 1).sum(), (labels == 0).sum()
    best_t, best_j = np.inf, -np.inf
    for t in np.append(np.unique(scores), np.inf):
        pred = scores >= t
        j = (pred & (labels == 1)).sum() / pos + (~pred & (labels == 0)).sum() / neg - 1.0
        if j > best_j:
            best_t, best_j = float(t), float(j)
    return best_t, best_j


@dataclass
class SubjectEnsemble:
    subjects: np.ndarray
    scores: np.ndarray
    labels: np.ndarray
    threshold: float
    predictions: np.ndarray
    flags: list[str] = field(default_factory=list)


def subject_ensemble(probs, subject_ids, true_labels) -> SubjectEnsemble:
    """Average class-1 fragment probabilities per subject, then threshold at Youden's J.

    ``probs`` may be (n,) class-1 probabilities or (n, 2) probability rows.
    """
    probs = np.asarray(probs, dtype=np.float64)
    p1 = probs[:, 1] if probs.ndim == 2 else probs
    sid = np.asarray(subject_ids)
    true = np.asarray(true_labels).astype(np.int64)
    subjects = np.unique(sid)
    scores = np.array([p1[sid == s].mean() for s in subjects])
    labels = np.array([true[sid == s][0] for s in subjects])
    flags = []
    if len(np.unique(labels)) < 2:
        threshold = 0.5
        flags.append("single_class_threshold_0.5")
        logger.warning("subject ensemble over a single class; threshold falls back to 0.5")
    else:
        threshold, _ = youden_threshold(scores, labels)
    return SubjectEnsemble(subjects, scores, labels, threshold, (scores >= threshold).astype(np.int64), flags)


def evaluate(probs, subject_ids, true_labels) -> dict:
    """Fragment metrics at argmax plus subject metrics after ensembling."""
    probs = np.asarray(probs, dtype=np.float64)
    frag = fragment_metrics((probs[:, 1] > probs[:, 0]).astype(np.int64), true_labels)
    ens = subject_ensemble(probs, subject_ids, true_labels)
    subj = fragment_metrics(ens.predictions, ens.labels)
    return {
        "fragment": frag.as_dict(),
        "subject": subj.as_dict(),
        "threshold": ens.threshold,
        "flags": frag.flags + ens.flags,
    }
