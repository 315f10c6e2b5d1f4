"""Seed-stratified percentile bootstrap for training-curve bands."""

from __future__ import annotations

import numpy as np


def bootstrap_ci(per_seed: np.ndarray, n_resamples: int = 1000, alpha: float = 0.05, seed: int = 0):
    """Percentile confidence band for the mean across seeds.

    `per_seed` is [n_seeds, n_points]; resampling happens over the seed
    axis only, so each resample is a full curve. Returns (lo, hi) arrays
    of length n_points.
    """
    per_seed = np.asarray(per_seed, dtype=float)
    if per_seed.ndim != 2:
        raise ValueError(f"expected [seeds, points], got shape {per_seed.shape}")
    n_seeds = per_seed.shape[0]
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, n_seeds, size=(n_resamples, n_seeds))
    means = per_seed[idx].mean(axis=1)  # [n_resamples, n_points]
    lo = np.percentile(means, 100 * alpha / 2, axis=0)
    hi = np.percentile(means, 100 * (1 - alpha / 2), axis=0)
    return lo, hi
