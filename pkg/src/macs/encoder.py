"""Fragment encoder: convolution starter, temporal clipper, covariance networks on the
SPD manifold, log-Euclidean cross-temporal attention, eigenvalue rectification and
tangent-space readout.

Every function takes and returns :class:`~macs.diffcore.Tensor` objects with
arbitrary leading batch axes, so the same code serves single matrices, batches of
fragments and gradient checks.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

logger = logging.getLogger(__name__)

EPS_SPD = 1e-5
EPS_REIG = 1e-4
_MASK = -1e30


@dataclass(frozen=True)
class EncoderConfig:
    d: int = 8
    d1: int | None = None  # defaults to ceil(d / 2)
    n_clips: int = 2
    kernel: int = 25
    eps_spd: float = EPS_SPD
    eps_reig: float = EPS_REIG
    layer_norm: bool = True
    # "covariance" or "correlation"
    connectivity: str = "covariance"
    # "mixing" blends neighbouring clips; "literal" keeps only the clip's own value term
    attention: str = "mixing"

    @property
    def reduced_dim(self) -> int:
        return self.d1 if self.d1 is not None else math.ceil(self.d / 2)

    @property
    def embedding_dim(self) -> int:
        m = self.reduced_dim
        return self.n_clips * m * (m + 1) // 2


@dataclass(frozen=True)
class SpdMatrix:
    """SPD matrix with its cached eigendecomposition."""

    values: np.ndarray
    eigvals: np.ndarray
    eigvecs: np.ndarray

    @classmethod
    def from_values(cls, values, eps: float = EPS_SPD) -> "SpdMatrix":
        values = np.asarray(values, dtype=np.float64)
        if not np.allclose(values, values.T, atol=1e-10, rtol=0):
            raise ValueError("matrix is not symmetric")
        lam, u = np.linalg.eigh(0.5 * (values + values.T))
        if lam.min() < eps:
            raise ValueError(f"min eigenvalue {lam.min():.3g} below {eps}")
        return cls(values, lam, u)

    def log(self) -> np.ndarray:
        return (self.eigvecs * np.log(self.eigvals)) @ self.eigvecs.T


def init_params(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    d, m, k = cfg.d, cfg.reduced_dim, cfg.kernel
    delta = np.zeros((d, k))
    delta[:, (k - 1) // 2] = 1.0
    params = {
        "spatial_w": np.eye(d) + rng.normal(scale=0.1 / np.sqrt(d), size=(d, d)),
        "spatial_b": np.zeros(d),
        "temporal_w": delta + rng.normal(scale=0.05, size=(d, k)),
        "temporal_b": np.zeros(d),
        "ln_gamma": np.ones(d),
        "ln_beta": np.zeros(d),
    }
    for name in ("w_q", "w_k", "w_v"):
        params[name] = random_orthonormal(d, m, rng)
    return params


def random_orthonormal(d: int, m: int, rng: np.random.Generator) -> np.ndarray:
    q, _ = retract(rng.standard_normal((d, m)))
    return q


def retract(w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """QR retraction onto orthonormal columns with a sign convention making diag(R) > 0."""
    q, r = np.linalg.qr(w)
    signs = np.where(np.diag(r) < 0, -1.0, 1.0)
    return q * signs, r * signs[:, None]


# -- building blocks --------------------------------------------------------


def starter(x: Tensor, p: Mapping[str, Tensor], cfg: EncoderConfig) -> Tensor:
    """Spatial conv across channels, temporal conv (same padding), per-channel layer norm, tanh."""
    h = dc.conv_channels(x, p["spatial_w"], p["spatial_b"])
    h = dc.conv_time(h, p["temporal_w"], p["temporal_b"])
    if cfg.layer_norm:
        h = dc.layer_norm(h, p["ln_gamma"], p["ln_beta"])
    return dc.tanh(h)


def clip(features: Tensor, n_clips: int) -> Tensor:
    """(..., d, T) -> (..., I, d, T // I), dropping any trailing remainder."""
    if n_clips <= 0:
        raise ValueError("number of clips must be positive")
    *lead, d, t = features.shape
    length = t // n_clips
    if length == 0:
        raise ValueError(f"cannot cut {t} samples into {n_clips} clips")
    h = dc.slice_(features, 0, n_clips * length, axis=-1)
    h = dc.reshape(h, (*lead, d, n_clips, length))
    nl = len(lead)
    return dc.permute(h, tuple(range(nl)) + (nl + 1, nl, nl + 2))


def sync(clips: Tensor, connectivity: str = "covariance") -> Tensor:
    """Sample covariance across time of each clip (row-centred), symmetrized."""
    length = clips.shape[-1]
    if length < 2:
        raise ValueError("clips need at least 2 samples")
    centred = clips - dc.mean(clips, axis=-1, keepdims=True)
    phi = (centred @ dc.transpose(centred)) / (length - 1)
    if connectivity == "correlation":
        d = phi.shape[-1]
        diag = dc.take(phi, (..., np.arange(d), np.arange(d)))
        inv = dc.exp(dc.log(dc.maximum(diag, 1e-12)) * -0.5)
        phi = phi * dc.reshape(inv, (*inv.shape, 1)) * dc.reshape(inv, (*inv.shape[:-1], 1, d))
    elif connectivity != "covariance":
        raise ValueError(f"unknown connectivity {connectivity!r}")
    return 0.5 * (phi + dc.transpose(phi))


def _rebuild(u: Tensor, lam: Tensor) -> Tensor:
    """u diag(lam) u^T for stacked matrices."""
    scaled = u * dc.reshape(lam, (*lam.shape[:-1], 1, lam.shape[-1]))
    return scaled @ dc.transpose(u)


def spd_function(x: Tensor, fn: Callable[[Tensor], Tensor]) -> Tensor:
    lam, u = dc.eigh(x)
    return _rebuild(u, fn(lam))


def spd_log(x: Tensor) -> Tensor:
    return spd_function(x, dc.log)


def sym_exp(x: Tensor) -> Tensor:
    return spd_function(x, dc.exp)


def to_spd(phi: Tensor, eps: float = EPS_SPD) -> Tensor:
    """Eigenvalue clamp max(lam, eps) and reconstruction."""
    return spd_function(phi, lambda lam: dc.maximum(lam, eps))


def le_dist(x: Tensor, y: Tensor) -> Tensor:
    """Squared log-Euclidean distance ||log X - log Y||_F^2 over the last two axes."""
    diff = spd_log(x) - spd_log(y)
    return dc.sum_(diff * diff, axis=(-2, -1))


def bimap(w: Tensor, x: Tensor, eps: float | None = None) -> Tensor:
    """W^T X W (d1 x d1).  With ``eps`` set the result is eigen-clamped if W is rank-deficient."""
    out = dc.transpose(w) @ x @ w
    if eps is not None:
        s = np.linalg.svd(w.data, compute_uv=False)
        if s.min() < 1e-8 * max(s.max(), 1.0):
            logger.warning("bimap: rank-deficient weight, clamping output eigenvalues")
            out = to_spd(out, eps)
    return out


def log_distance_matrix(keys: Tensor, queries: Tensor) -> Tensor:
    """Pairwise ||keys_i - queries_j||^2 for tangent matrices stacked on axis -3."""
    *lead, n, m, _ = keys.shape
    ki = dc.reshape(keys, (*lead, n, 1, m, m))
    qj = dc.reshape(queries, (*lead, 1, n, m, m))
    diff = ki - qj
    return dc.sum_(diff * diff, axis=(-2, -1))


def attention_weights(dist: Tensor) -> Tensor:
    """Softmax over j != i of the negative distances (rows sum to 1)."""
    n = dist.shape[-1]
    mask = np.where(np.eye(n, dtype=bool), _MASK, 0.0)
    return dc.softmax(-dist + mask)


def manifold_attention(spd: Tensor, p: Mapping[str, Tensor], mode: str = "mixing") -> tuple[Tensor, Tensor]:
    """Cross-temporal attention over the clip axis (-3) of stacked SPD matrices.

    Returns the tangent outputs F (..., I, d1, d1) and the attention weights (..., I, I).
    """
    n = spd.shape[-3]
    if n < 2:
        raise ValueError("manifold attention needs at least two clips")
    log_k = spd_log(bimap(p["w_k"], spd))
    log_q = spd_log(bimap(p["w_q"], spd))
    log_v = spd_log(bimap(p["w_v"], spd))
    weights = attention_weights(log_distance_matrix(log_k, log_q))
    *lead, _, m, _ = log_v.shape
    if mode == "mixing":
        flat = dc.reshape(log_v, (*lead, n, m * m))
        mixed = dc.reshape(weights @ flat, (*lead, n, m, m))
        out = 0.5 * log_v + 0.5 * mixed
    elif mode == "literal":
        total = dc.sum_(weights, axis=-1)
        out = log_v * dc.reshape(total, (*lead, n, 1, 1))
    else:
        raise ValueError(f"unknown attention mode {mode!r}")
    return out, weights


def rectify(f: Tensor, eps: float = EPS_REIG) -> Tensor:
    """exp of a tangent matrix followed by an eigenvalue floor at ``eps``."""
    return spd_function(f, lambda lam: dc.maximum(dc.exp(lam), eps))


def _triu_layout(m: int):
    rows, cols = np.triu_indices(m)
    weights = np.where(rows == cols, 1.0, np.sqrt(2.0))
    return rows, cols, weights


def readout(spd: Tensor) -> Tensor:
    """log-map each matrix, keep the upper triangle (off-diagonals scaled by sqrt 2), concatenate clips."""
    logs = spd_log(spd)
    *lead, n, m, _ = logs.shape
    rows, cols, weights = _triu_layout(m)
    vec = dc.take(logs, (..., rows, cols)) * weights
    return dc.reshape(vec, (*lead, n * len(rows)))


def encode(x, p: Mapping[str, Tensor], cfg: EncoderConfig, monitor=None) -> Tensor:
    """(..., d, T_s) fragments -> (..., embedding_dim) tangent embeddings.

    ``monitor(stage, array)`` is called with the matrices leaving ``to_spd`` and ``rectify``.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    h = starter(x, p, cfg)
    clips = clip(h, cfg.n_clips)
    spd = to_spd(sync(clips, cfg.connectivity), cfg.eps_spd)
    if monitor is not None:
        monitor("to_spd", spd.data)
    f, _ = manifold_attention(spd, p, cfg.attention)
    s = rectify(f, cfg.eps_reig)
    if monitor is not None:
        monitor("rectify", s.data)
    return readout(s)
