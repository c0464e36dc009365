"""Multi-view contrastive losses, the conditional discriminative loss and the latent memory bank.

Batch latents are laid out view-major: rows ``0..B-1`` hold the first view of each
sample, rows ``B..2B-1`` the second.  Memory entries are appended after the batch
rows as constants; they enlarge the softmax denominator and, when
``memory_positives`` is on, supply label-matched positives for the supervised term.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

PROB_FLOOR = 1e-12
_MASK = -1e30


@dataclass(frozen=True)
class ContrastiveConfig:
    tau: float = 0.1
    memory: int = 300
    memory_positives: bool = True

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("temperature must be positive")
        if self.memory < 0:
            raise ValueError("memory length must be >= 0")


class MemoryBank:
    """FIFO of detached latents with their train labels and trust flags."""

    def __init__(self, capacity: int):
        self.capacity = int(capacity)
        self._entries: deque = deque(maxlen=self.capacity if self.capacity > 0 else 0)

    def __len__(self) -> int:
        return len(self._entries)

    def push(self, z, labels, trusted) -> None:
        if self.capacity == 0:
            return
        z = np.array(z.data if isinstance(z, Tensor) else z, dtype=np.float64, copy=True)
        for row, lab, tr in zip(z, np.asarray(labels), np.asarray(trusted)):
            self._entries.append((row.copy(), int(lab), bool(tr)))

    def view(self, z_dim: int | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if not self._entries:
            width = 0 if z_dim is None else z_dim
            return np.zeros((0, width)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=bool)
        z = np.stack([e[0] for e in self._entries])
        labels = np.array([e[1] for e in self._entries], dtype=np.int64)
        trusted = np.array([e[2] for e in self._entries], dtype=bool)
        return z, labels, trusted


def _candidates(z_views: Tensor, memory) -> Tensor:
    if memory is None or len(memory[0]) == 0:
        return z_views
    return dc.concat([z_views, Tensor(memory[0])], axis=0)


def _anchor_losses(cand: Tensor, anchors: np.ndarray, positives: np.ndarray, tau: float):
    """Per-anchor -mean_{p in P(a)} log softmax_{r != a}(z_a . z_r / tau)[p].

    ``positives`` is an (A, N) 0/1 matrix over candidates.  Returns the (A,) loss tensor
    and the mask of anchors with at least one positive (the others carry 0).
    """
    n = cand.shape[0]
    # zero latents (degenerate projector output) take no part in the contrast
    dead = ~np.any(cand.data != 0, axis=1)
    self_mask = np.zeros((len(anchors), n))
    self_mask[:, dead] = _MASK
    self_mask[np.arange(len(anchors)), anchors] = _MASK
    sims = (dc.take(cand, anchors) @ dc.transpose(cand)) / tau
    logp = dc.log_softmax(sims + self_mask)
    positives = positives.astype(np.float64)
    positives[np.arange(len(anchors)), anchors] = 0.0
    positives[:, dead] = 0.0
    npos = positives.sum(axis=1)
    valid = (npos > 0) & ~dead[anchors]
    weights = positives / np.where(valid, npos, 1.0)[:, None]
    return -dc.sum_(logp * weights, axis=1), valid


def _mean_over(per_anchor: Tensor, valid: np.ndarray) -> Tensor:
    if not valid.any():
        return Tensor(0.0)
    return dc.sum_(per_anchor * valid.astype(np.float64)) / float(valid.sum())


def supcon_term(i: int, z, labels, tau: float) -> float:
    """Single-anchor supervised contrastive term over the rows of ``z`` (0 if no positive)."""
    z = z if isinstance(z, Tensor) else Tensor(z)
    labels = np.asarray(labels)
    pos = (labels == labels[i])[None, :]
    loss, valid = _anchor_losses(z, np.array([i]), pos, tau)
    return float(loss.data[0]) if valid[0] else 0.0


def _twin_loss(z_views: Tensor, select: np.ndarray, memory, tau: float) -> Tensor:
    """Self-supervised term: each selected view's positive is the other view of the same sample."""
    b = len(select)
    idx = np.flatnonzero(select)
    if len(idx) == 0:
        return Tensor(0.0)
    cand = _candidates(z_views, memory)
    anchors = np.concatenate([idx, idx + b])
    twins = np.concatenate([idx + b, idx])
    pos = np.zeros((len(anchors), cand.shape[0]))
    pos[np.arange(len(anchors)), twins] = 1.0
    per, valid = _anchor_losses(cand, anchors, pos, tau)
    return _mean_over(per, valid)


def loss_ag(z_views: Tensor, distrusted: np.ndarray, memory, tau: float) -> Tensor:
    """Twin-view contrast over the augmented views of distrusted samples."""
    return _twin_loss(z_views, np.asarray(distrusted, dtype=bool), memory, tau)


def loss_sw(z_views: Tensor, trusted: np.ndarray, memory, tau: float) -> Tensor:
    """Twin-view contrast over the blended views of trusted samples."""
    return _twin_loss(z_views, np.asarray(trusted, dtype=bool), memory, tau)


def loss_st(z_views: Tensor, trusted: np.ndarray, labels: np.ndarray, partner: np.ndarray,
            lam: np.ndarray, memory, tau: float, memory_positives: bool = True) -> Tensor:
    """Interpolated supervised contrast: lam * L(z, y*) + (1 - lam) * L(z, y+) per trusted view.

    Positives are trusted views (and trusted memory entries) carrying the target label;
    labels of distrusted samples are never read.
    """
    trusted = np.asarray(trusted, dtype=bool)
    b = len(trusted)
    idx = np.flatnonzero(trusted)
    if len(idx) == 0:
        return Tensor(0.0)
    labels = np.asarray(labels)
    cand = _candidates(z_views, memory)
    n = cand.shape[0]
    # label of every candidate that may serve as a positive, -1 otherwise
    cand_label = np.full(n, -1, dtype=np.int64)
    cand_label[idx] = labels[idx]
    cand_label[idx + b] = labels[idx]
    if memory is not None and memory_positives and len(memory[0]):
        mem_lab = np.where(memory[2], memory[1], -1)
        cand_label[2 * b:] = mem_lab
    anchors = np.concatenate([idx, idx + b])
    src = np.concatenate([idx, idx])
    y_star = labels[src]
    y_plus = labels[partner[src]]
    w = np.asarray(lam, dtype=np.float64)[src]
    per_star, ok_star = _anchor_losses(cand, anchors, cand_label[None, :] == y_star[:, None], tau)
    per_plus, ok_plus = _anchor_losses(cand, anchors, cand_label[None, :] == y_plus[:, None], tau)
    per = per_star * (w * ok_star) + per_plus * ((1.0 - w) * ok_plus)
    return _mean_over(per, ok_star | ok_plus)


def dl_targets(trusted: np.ndarray, labels: np.ndarray, partner: np.ndarray, lam: np.ndarray,
               aux: np.ndarray) -> np.ndarray:
    """(B, 2) soft targets: lam-mix of one-hot y*, y+ for trusted rows, the auxiliary label otherwise."""
    trusted = np.asarray(trusted, dtype=bool)
    b = len(trusted)
    eye = np.eye(2)
    targets = np.asarray(aux, dtype=np.float64).copy()
    idx = np.flatnonzero(trusted)
    labels = np.asarray(labels)
    lam = np.asarray(lam, dtype=np.float64)
    targets[idx] = lam[idx, None] * eye[labels[idx]] + (1.0 - lam[idx, None]) * eye[labels[partner[idx]]]
    assert targets.shape == (b, 2)
    return targets


def loss_dl(probs: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy of classifier probabilities against (detached) soft targets."""
    logp = dc.log(dc.maximum(probs, PROB_FLOOR))
    return -dc.mean(dc.sum_(logp * np.asarray(targets, dtype=np.float64), axis=-1))


def total_loss(parts: dict[str, Tensor]) -> Tensor:
    """L = L^Ag + L^Sw + L^St + L^DL."""
    total = Tensor(0.0)
    for key in ("ag", "sw", "st", "dl"):
        if key in parts:
            total = total + parts[key]
    return total
