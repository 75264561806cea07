"""Patch-based Laplacian-variance sharpness."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from ..volume import Volume


def laplacian_response(data: np.ndarray, sigma: float = 0.5) -> np.ndarray:
    """6-neighbour discrete Laplacian of the Gaussian-smoothed volume.

    Both filters reflect at the boundary (``d c b a | a b c d``).
    """
    data = np.asarray(data, dtype=np.float64)
    if sigma > 0:
        data = ndimage.gaussian_filter(data, sigma, mode="reflect")
    return ndimage.laplace(data, mode="reflect")


def sample_origins(shape, patch: int, n: int, seed) -> np.ndarray:
    """``n`` uniform in-bounds origins for ``patch``-sized cubes (or squares)."""
    rng = np.random.default_rng(seed)
    return np.stack([rng.integers(0, s - patch + 1, size=n) for s in shape], axis=1)


def laplacian_variance_sharpness(v, sigma: float = 0.5, patch: int = 64, n: int = 1000, seed=0) -> float:
    """Mean over ``n`` random cubic patches of the variance of the Laplacian response.

    The same ``seed`` yields the same patch locations for every volume of a
    given shape, so compared images are sampled at shared positions.
    """
    data = np.asarray(v.data if isinstance(v, Volume) else v)
    if n < 1:
        raise ValueError("n must be >= 1")
    if patch < 1 or patch > min(data.shape):
        raise ValueError(f"patch {patch} does not fit volume shape {data.shape}")
    lap = laplacian_response(data, sigma)
    origins = sample_origins(data.shape, patch, n, seed)
    vals = [lap[o[0]:o[0] + patch, o[1]:o[1] + patch, o[2]:o[2] + patch].var() for o in origins]
    return float(np.mean(vals))
