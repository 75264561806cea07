"""Distribution-level metrics on feature sets: Frechet distance, coverage, density."""
from __future__ import annotations

from typing import Tuple

import numpy as np
from scipy.spatial.distance import cdist

from .perceptual import FeatureSet


def _feats(x) -> np.ndarray:
    return x.features if isinstance(x, FeatureSet) else np.asarray(x, dtype=np.float64)


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(mu1, cov1, mu2, cov2, jitter: float = 1e-6) -> float:
    """|mu1 - mu2|^2 + Tr(C1 + C2 - 2 (C1 C2)^(1/2)).

    The trace of (C1 C2)^(1/2) is taken as that of the symmetric matrix
    (C1^(1/2) C2 C1^(1/2))^(1/2). ``jitter`` is added to both diagonals
    when either covariance is numerically singular.
    """
    cov1 = np.atleast_2d(cov1)
    cov2 = np.atleast_2d(cov2)
    scale = max(np.abs(np.diag(cov1)).max(), np.abs(np.diag(cov2)).max(), 1e-300)
    if min(np.linalg.eigvalsh(cov1).min(), np.linalg.eigvalsh(cov2).min()) < 1e-12 * scale:
        eye = np.eye(len(cov1)) * jitter
        cov1, cov2 = cov1 + eye, cov2 + eye
    s1 = _psd_sqrt(cov1)
    cross = np.sqrt(np.clip(np.linalg.eigvalsh(s1 @ cov2 @ s1), 0.0, None)).sum()
    diff = np.asarray(mu1) - np.asarray(mu2)
    return float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * cross)


def fid(real, gen) -> float:
    a, b = _feats(real), _feats(gen)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("FID needs at least 2 samples per set")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    return frechet_distance(a.mean(0), np.cov(a, rowvar=False), b.mean(0), np.cov(b, rowvar=False))


def coverage_density(real, gen, k: int) -> Tuple[float, float]:
    """k-NN coverage and density of ``gen`` with respect to ``real``.

    The ball of real point i has radius equal to the distance to its k-th
    nearest other real point. Coverage is the fraction of balls holding at
    least one generated point; density is the total number of
    (generated point, ball) memberships divided by k times the number of
    generated points.
    """
    a, b = _feats(real), _feats(gen)
    if k < 1 or k >= len(a):
        raise ValueError(f"k must satisfy 1 <= k < n_real ({len(a)}), got {k}")
    if len(b) == 0:
        raise ValueError("generated set is empty")
    d_rr = cdist(a, a)
    np.fill_diagonal(d_rr, np.inf)
    radii = np.partition(d_rr, k - 1, axis=1)[:, k - 1]
    inside = cdist(a, b) <= radii[:, None]
    coverage = float(inside.any(axis=1).mean())
    density = float(inside.sum() / (k * len(b)))
    return coverage, density
