"""SMOTE interpolation in the autoencoder's latent space."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .. import seeding
from ..errors import ValidationError
from .autoencoder import AutoencoderPair


@dataclass
class GeneratedBatch:
    samples: np.ndarray       # decoder outputs [G x d]
    latents: np.ndarray       # interpolated codes [G x latent]
    source_index: np.ndarray  # row of the source skewed sample
    neighbor_index: np.ndarray
    rand_t: np.ndarray

    def __len__(self) -> int:
        return len(self.rand_t)


def nearest_neighbors(points: np.ndarray, k: int) -> np.ndarray:
    """Indices of each row's k nearest other rows (Euclidean), ties to the lower index."""
    d = cdist(points, points)
    np.fill_diagonal(d, np.inf)
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def latent_smote(
    pair: AutoencoderPair,
    skew_samples,
    count: int,
    smote_k: int = 5,
    seed: int = 0,
    *,
    client_id: int | None = None,
    rand_t=None,
) -> GeneratedBatch:
    """Generate ``count`` samples by interpolating latent codes toward a random near neighbor.

    ``rand_t`` overrides the interpolation weights (one value or one per draw).
    """
    x = np.asarray(skew_samples, dtype=np.float64)
    if count < 1:
        raise ValidationError("count must be >= 1")
    if smote_k < 1:
        raise ValidationError("smote_k must be >= 1")
    if x.shape[0] < smote_k + 1:
        who = f"client {client_id}" if client_id is not None else "skewed pool"
        raise ValidationError(f"{who}: {x.shape[0]} skewed samples, need at least smote_k+1={smote_k + 1}")
    z = pair.encode(x)
    neighbors = nearest_neighbors(z, smote_k)
    rng = seeding.make_rng(seed, seeding.SMOTE)
    src = rng.integers(0, x.shape[0], size=count)
    nb = neighbors[src, rng.integers(0, smote_k, size=count)]
    t = rng.random(count)
    if rand_t is not None:
        t = np.broadcast_to(np.asarray(rand_t, dtype=np.float64), (count,)).copy()
        if (t < 0).any() or (t > 1).any():
            raise ValidationError("rand_t must lie in [0, 1]")
    latents = z[src] + t[:, None] * (z[nb] - z[src])
    return GeneratedBatch(pair.decode(latents), latents, src, nb, t)
