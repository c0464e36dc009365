"""Dual heads on the embedding: a unit-norm latent for contrast/confidence and a binary classifier."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor


@dataclass(frozen=True)
class ProjectorConfig:
    hidden: int = 64
    z_dim: int = 32

    def __post_init__(self):
        if self.z_dim < 2:
            raise ValueError("z_dim must be at least 2")


def _affine_init(rng, n_in: int, n_out: int):
    bound = 1.0 / np.sqrt(n_in)
    return rng.uniform(-bound, bound, size=(n_in, n_out)), rng.uniform(-bound, bound, size=n_out)


def init_params(embedding_dim: int, cfg: ProjectorConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    out = {}
    for head, width in (("lat", cfg.z_dim), ("cls", 2)):
        out[f"{head}_w1"], out[f"{head}_b1"] = _affine_init(rng, embedding_dim, cfg.hidden)
        out[f"{head}_w2"], out[f"{head}_b2"] = _affine_init(rng, cfg.hidden, width)
    return out


def _mlp(e: Tensor, p: Mapping[str, Tensor], head: str) -> Tensor:
    h = dc.tanh(e @ p[f"{head}_w1"] + p[f"{head}_b1"])
    return h @ p[f"{head}_w2"] + p[f"{head}_b2"]


def latent(e: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    """Unit-norm latent.  An all-zero pre-activation maps to the zero vector (see :func:`degenerate`)."""
    return dc.l2_normalize(_mlp(e, p, "lat"))


def degenerate(z) -> np.ndarray:
    """Mask of latents that came out as zero vectors and must be left out of contrast."""
    z = z.data if isinstance(z, Tensor) else np.asarray(z)
    return ~np.any(z != 0, axis=-1)


def logits(e: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    return _mlp(e, p, "cls")


def classify(e: Tensor, p: Mapping[str, Tensor]) -> tuple[Tensor, Tensor]:
    """Logits and softmax probabilities (length 2)."""
    lg = logits(e, p)
    return lg, dc.softmax(lg)
