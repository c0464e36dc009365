"""
Covariance matrices as points on a curved space
===============================================

A short walk through the geometry used by the encoder: log-Euclidean
distances, the bilinear map that shrinks a covariance, and the attention
weights that compare clips of one fragment.
"""

import numpy as np

from macs import encoder as enc
from macs.diffcore import Tensor

rng = np.random.default_rng(0)


def random_spd(d):
    a = rng.normal(size=(d, d))
    return a @ a.T + 0.1 * np.eye(d)


# the distance is the Frobenius norm between matrix logarithms (squared here)
x, y = random_spd(4), random_spd(4)
d_xy = float(enc.le_dist(Tensor(x), Tensor(y)).data)
print("d(X, Y)             ", d_xy)

# scaling both points by the same factor shifts both logs equally, so nothing changes
print("d(3X, 3Y)           ", float(enc.le_dist(Tensor(3 * x), Tensor(3 * y)).data))

# inverting both flips the sign of both logs, again no change
print("d(X^-1, Y^-1)       ", float(enc.le_dist(Tensor(np.linalg.inv(x)), Tensor(np.linalg.inv(y))).data))

# identity vs e*I: every log-eigenvalue differs by exactly one
print("d(I, eI) for d=4    ", float(enc.le_dist(Tensor(np.eye(4)), Tensor(np.e * np.eye(4))).data))

# %%
# Bilinear map
# ------------
# W^T X W with orthonormal W (4x2) maps a 4x4 covariance to a 2x2 one and
# keeps it positive definite.

w = enc.random_orthonormal(4, 2, rng)
small = enc.bimap(Tensor(w), Tensor(x)).data
print("W^T W =\n", np.round(w.T @ w, 12))
print("eigenvalues of W^T X W:", np.linalg.eigvalsh(small))

# %%
# Attention across clips
# ----------------------
# Three clips of one fragment. Clips 0 and 1 share a covariance, clip 2 is
# far away, so clip 0 attends almost entirely to clip 1.

base = random_spd(4)
clips = np.stack([base, base + 0.01 * np.eye(4), 5 * random_spd(4)])
cfg = enc.EncoderConfig(d=4, d1=2, n_clips=3)
p = {k: Tensor(v) for k, v in enc.init_params(cfg, rng).items()}
_, weights = enc.manifold_attention(Tensor(clips), p)
print("attention weights (row i attends over j != i):")
print(np.round(weights.data, 3))
