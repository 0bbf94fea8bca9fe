"""Density and density-factor scoring of generated samples, and median-threshold removal.

For a point j with k nearest same-class neighbors N_1..N_k (Euclidean, in the
original feature space, the point itself excluded)::

    density(j) = 1 / (1 + sum_q dist(j, N_q) / (k + 1))
    factor(j)  = sum_q density(N_q) / (k * density(j))

Each neighbor's density uses that neighbor's own k nearest points in the same
pool, so j may appear among them.  A factor well above 1 means j sits in a
sparser spot than its neighbors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from ..errors import ValidationError
from .oversample import GeneratedBatch


def _check_pool(pool: np.ndarray, k: int) -> None:
    if k < 1:
        raise ValidationError("k must be >= 1")
    if pool.ndim != 2 or pool.shape[0] < k + 1:
        raise ValidationError(f"pool has {pool.shape[0]} rows; need at least k+1={k + 1}")


def _neighbors_of(pool: np.ndarray, i: int, k: int) -> tuple[np.ndarray, np.ndarray]:
    d = np.sqrt(np.sum((pool - pool[i]) ** 2, axis=1))
    d[i] = np.inf
    nbr = np.argsort(d, kind="stable")[:k]
    return nbr, d[nbr]


def density(sample_idx: int, pool, k: int) -> float:
    pool = np.asarray(pool, dtype=np.float64)
    _check_pool(pool, k)
    _, dist = _neighbors_of(pool, sample_idx, k)
    return 1.0 / (1.0 + dist.sum() / (k + 1))


def density_factor(sample_idx: int, pool, k: int) -> float:
    pool = np.asarray(pool, dtype=np.float64)
    _check_pool(pool, k)
    nbr, _ = _neighbors_of(pool, sample_idx, k)
    neighbor_density = sum(density(int(q), pool, k) for q in nbr)
    return neighbor_density / (k * density(sample_idx, pool, k))


def pool_densities(pool, k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized (density, density_factor, neighbor ids) for every pool row."""
    pool = np.asarray(pool, dtype=np.float64)
    _check_pool(pool, k)
    d = cdist(pool, pool)
    np.fill_diagonal(d, np.inf)
    nbr = np.argsort(d, axis=1, kind="stable")[:, :k]
    dist = np.take_along_axis(d, nbr, axis=1)
    phi = 1.0 / (1.0 + dist.sum(axis=1) / (k + 1))
    psi = phi[nbr].sum(axis=1) / (k * phi)
    return phi, psi, nbr


@dataclass
class DensityReport:
    density: np.ndarray        # per generated sample
    density_factor: np.ndarray
    neighbor_ids: np.ndarray   # [G x k] rows of the pool (originals first, then generated)
    removed: np.ndarray
    median: float
    removal_order: np.ndarray  # generated-sample indices in the order they were dropped
    original_count: int
    k: int

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "median_threshold": self.median,
            "original_count": self.original_count,
            "generated_count": int(len(self.removed)),
            "kept_ids": np.flatnonzero(~self.removed).tolist(),
            "removed_ids": self.removal_order.tolist(),
            "removed_above_median": int(np.sum(self.density_factor[self.removal_order] > self.median)),
            "density": self.density.tolist(),
            "density_factor": self.density_factor.tolist(),
        }


def denoise(batch: GeneratedBatch, original_skew, denoise_k: int, target_count: int):
    """Drop generated samples with the highest density factor until ``target_count`` remain.

    Factors are computed once over the pooled original and generated skewed
    data.  Removal starts with the samples above the median factor and, if the
    batch is still too large, continues down the same descending order.  Equal
    factors are removed highest index first.
    """
    g = len(batch)
    if target_count < 0 or target_count > g:
        raise ValidationError(f"target_count {target_count} outside [0, {g}]")
    original = np.asarray(original_skew, dtype=np.float64).reshape(-1, batch.samples.shape[1])
    pool = np.vstack([original, batch.samples])
    phi, psi, nbr = pool_densities(pool, denoise_k)
    gen = slice(len(original), None)
    phi_g, psi_g, nbr_g = phi[gen], psi[gen], nbr[gen]
    median = float(np.median(psi_g))
    order = np.lexsort((-np.arange(g), -psi_g))
    drop = order[: g - target_count]
    removed = np.zeros(g, dtype=bool)
    removed[drop] = True
    report = DensityReport(phi_g, psi_g, nbr_g, removed, median, drop, len(original), denoise_k)
    return batch.samples[~removed], report
