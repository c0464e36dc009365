"""Confidence stratification by cosine-kNN label agreement with class-balanced selection."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

SIM_DECIMALS = 12


@dataclass(frozen=True)
class StratifierConfig:
    k: int = 25
    warmup_epochs: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("K must be at least 1")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")


@dataclass
class ConfidencePartition:
    trusted: np.ndarray  # sorted ids
    distrusted: np.ndarray  # sorted ids
    labels: np.ndarray  # train label of every id
    # id -> soft auxiliary label (classifier probabilities) for distrusted ids
    aux: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def size(self) -> int:
        return len(self.labels)

    def trusted_mask(self) -> np.ndarray:
        mask = np.zeros(self.size, dtype=bool)
        mask[self.trusted] = True
        return mask

    def pairs(self) -> list[tuple[int, int]]:
        """Trusted pairs: unordered pairs of trusted ids with equal train label."""
        out = []
        for c in (0, 1):
            ids = self.trusted[self.labels[self.trusted] == c]
            out.extend(itertools.combinations(ids.tolist(), 2))
        return sorted(out)

    def counts(self) -> tuple[int, int]:
        lab = self.labels[self.trusted]
        return int((lab == 0).sum()), int((lab == 1).sum())


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        logger.warning("cosine of a zero vector defined as 0")
        return 0.0
    return float(a @ b / (na * nb))


def cosine_matrix(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """All-pairs cosine similarity and the mask of zero rows (whose similarities are 0)."""
    z = np.asarray(z, dtype=np.float64)
    norms = np.linalg.norm(z, axis=1)
    zero = norms == 0
    unit = z / np.where(zero, 1.0, norms)[:, None]
    return unit @ unit.T, zero


@dataclass
class KnnVote:
    p: np.ndarray  # (n, 2) fraction of neighbours per label
    ybar: np.ndarray  # (n,) neighbour-determined label
    neighbors: np.ndarray  # (n, K) ids, most similar first


def knn_labels(z: np.ndarray, y: np.ndarray, k: int) -> KnnVote:
    """K nearest neighbours by cosine (self excluded, ties to lower id); vote ties go to label 0."""
    y = np.asarray(y)
    n = len(y)
    if not 1 <= k < n:
        raise ValueError(f"need 1 <= K < n, got K={k}, n={n}")
    sim, _ = cosine_matrix(z)
    # similarities equal to 12 decimals count as ties, which go to the lower id
    sim = np.round(sim, SIM_DECIMALS)
    ids = np.broadcast_to(np.arange(n), (n, n))
    order = np.lexsort((ids, -sim), axis=1)
    # drop self from each row, keeping order
    not_self = order != np.arange(n)[:, None]
    order = order[not_self].reshape(n, n - 1)
    nb = order[:, :k]
    ones = (y[nb] == 1).sum(axis=1)
    p = np.stack([(k - ones) / k, ones / k], axis=1)
    ybar = (p[:, 1] > p[:, 0]).astype(np.int64)
    return KnnVote(p, ybar, nb)


def stratify(z: np.ndarray, y: np.ndarray, cfg: StratifierConfig, epoch: int,
             probs: np.ndarray | None = None) -> ConfidencePartition:
    """Trusted = kNN vote agrees with the label, then trimmed per class to the minority count.

    Within a class the kept samples are those with the highest agreement p_c (ties to lower id).
    ``probs`` (n, 2), the detached classifier output on un-augmented inputs, supplies the
    auxiliary labels of distrusted samples.
    """
    y = np.asarray(y, dtype=np.int64)
    n = len(y)
    ids = np.arange(n)
    trusted = np.zeros(0, dtype=np.int64)
    if epoch >= cfg.warmup_epochs:
        vote = knn_labels(z, y, cfg.k)
        cand = vote.ybar == y
        per_class = [ids[cand & (y == c)] for c in (0, 1)]
        n_min = min(len(c) for c in per_class)
        if n_min == 0:
            logger.info("epoch %d: a class has no trusted candidates; all samples distrusted", epoch)
        else:
            keep = []
            for c, members in enumerate(per_class):
                score = vote.p[members, c]
                order = np.lexsort((members, -score))
                keep.append(members[order[:n_min]])
            trusted = np.sort(np.concatenate(keep))
    mask = np.zeros(n, dtype=bool)
    mask[trusted] = True
    distrusted = ids[~mask]
    aux = {}
    if probs is not None:
        aux = {int(i): np.asarray(probs[i], dtype=np.float64).copy() for i in distrusted}
    return ConfidencePartition(trusted, distrusted, y.copy(), aux)


def diagnostics(part: ConfidencePartition, true_labels: np.ndarray) -> dict:
    """Trusted-set precision/recall against the true labels (never used for training)."""
    true_labels = np.asarray(true_labels)
    clean = part.labels == true_labels
    mask = part.trusted_mask()
    n0, n1 = part.counts()
    precision = float(clean[mask].mean()) if mask.any() else 0.0
    recall = float((clean & mask).sum() / clean.sum()) if clean.any() else 0.0
    return {"trusted_0": n0, "trusted_1": n1, "precision": precision, "recall": recall}
