"""Additive Gaussian jitter producing the two stochastic views of a fragment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AugmentConfig:
    sigma_lo: float = 0.0
    sigma_hi: float = 0.2
    # sigmas are multiples of the fragment's own standard deviation
    relative: bool = True

    def __post_init__(self):
        if not 0.0 <= self.sigma_lo <= self.sigma_hi:
            raise ValueError("need 0 <= sigma_lo <= sigma_hi")


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def augment(x: np.ndarray, sigma: float, seed) -> np.ndarray:
    """``x + eps`` with i.i.d. ``eps ~ N(0, sigma^2)``."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    x = np.asarray(x, dtype=np.float64)
    if sigma == 0:
        return x.copy()
    return x + sigma * _rng(seed).standard_normal(x.shape)


def dual_views(x: np.ndarray, cfg: AugmentConfig, seed) -> tuple[np.ndarray, np.ndarray]:
    """Two independent jittered copies; each draws its own sigma from [sigma_lo, sigma_hi]."""
    rng = _rng(seed)
    scale = float(np.std(x)) if cfg.relative else 1.0
    views = []
    for _ in range(2):
        sigma = rng.uniform(cfg.sigma_lo, cfg.sigma_hi) * scale
        views.append(augment(x, sigma, rng))
    return views[0], views[1]
