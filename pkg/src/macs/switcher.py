"""Confidence-gated mixup: trusted samples are blended with a trusted partner, distrusted ones bypass."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BlendDraw:
    lam: float
    partner: int


def fold_lambda(raw: float) -> float:
    return max(raw, 1.0 - raw)


def draw_lambda(seed) -> float:
    """Beta(1, 1) draw folded onto [0.5, 1]."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return fold_lambda(float(rng.beta(1.0, 1.0)))


def blend(x_star, y_star, x_plus, y_plus, lam: float):
    """Convex blend of two samples; the label is kept as the triple (y_star, y_plus, lam)."""
    x_star = np.asarray(x_star, dtype=np.float64)
    x_plus = np.asarray(x_plus, dtype=np.float64)
    if x_star.shape != x_plus.shape:
        raise ValueError(f"blend shape mismatch: {x_star.shape} vs {x_plus.shape}")
    if not 0.5 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0.5, 1], got {lam}")
    return lam * x_star + (1.0 - lam) * x_plus, (y_star, y_plus, lam)


@dataclass
class Routed:
    """Output of :func:`route`.

    ``views`` has the same shape as the input stack; ``lam`` and ``partner`` are per
    sample (lam = 1 and partner = self for samples that were not blended).
    """

    views: np.ndarray
    lam: np.ndarray
    partner: np.ndarray


def route(views: np.ndarray, trusted: np.ndarray, seed, lam_override: float | None = None) -> Routed:
    """Blend every trusted sample in each view with one trusted partner from the batch.

    ``views`` is (n_views, B, ...); all views of a sample share its lambda and partner.
    Distrusted samples are returned bit-for-bit unchanged.
    """
    views = np.asarray(views, dtype=np.float64)
    trusted = np.asarray(trusted, dtype=bool)
    b = views.shape[1]
    if trusted.shape != (b,):
        raise ValueError("trust mask must cover the batch")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    lam = np.ones(b)
    partner = np.arange(b)
    pool = np.flatnonzero(trusted)
    out = views.copy()
    for i in pool:
        partner[i] = pool[rng.integers(len(pool))]
        lam[i] = draw_lambda(rng) if lam_override is None else lam_override
    if len(pool):
        w = lam[pool].reshape((1, -1) + (1,) * (views.ndim - 2))
        out[:, pool] = w * views[:, pool] + (1.0 - w) * views[:, partner[pool]]
    return Routed(out, lam, partner)
