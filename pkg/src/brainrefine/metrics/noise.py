"""Noise extraction and histogram KL between noise distributions."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from ..volume import RegionMask, Volume


@dataclass
class NoiseEstimate:
    noise: np.ndarray
    method: str = "gaussian_highpass"
    params: dict = field(default_factory=dict)


def extract_noise(v, smooth_sigma: float = 1.0) -> NoiseEstimate:
    """High-pass residual ``v - G_sigma * v`` (reflecting boundaries).

    Any externally computed noise map can be wrapped in a ``NoiseEstimate``
    and used in place of this estimate.
    """
    if smooth_sigma <= 0:
        raise ValueError(f"smooth_sigma must be positive, got {smooth_sigma}")
    data = np.asarray(v.data if isinstance(v, Volume) else v, dtype=np.float64)
    noise = data - ndimage.gaussian_filter(data, smooth_sigma, mode="reflect")
    return NoiseEstimate(noise, "gaussian_highpass", {"smooth_sigma": float(smooth_sigma)})


def _values(x, region):
    arr = x.noise if isinstance(x, NoiseEstimate) else np.asarray(x)
    if region is None:
        return np.asarray(arr, dtype=np.float64).ravel()
    m = region.data if isinstance(region, RegionMask) else np.asarray(region, dtype=bool)
    if m.shape != arr.shape:
        raise ValueError(f"region shape {m.shape} does not match noise shape {arr.shape}")
    vals = np.asarray(arr, dtype=np.float64)[m]
    if vals.size == 0:
        raise ValueError("region is empty")
    return vals


def histogram_kl(a: np.ndarray, b: np.ndarray, bins: int = 64, eps: float = 1e-8) -> float:
    """KL(p_a || p_b) of histograms over the pooled range of ``a`` and ``b``.

    Every bin probability receives ``eps`` before renormalization.
    """
    if bins < 2:
        raise ValueError(f"bins must be >= 2, got {bins}")
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("empty sample")
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    if hi <= lo:
        return 0.0
    edges = np.linspace(lo, hi, bins + 1)
    pa = np.histogram(a, edges)[0] / a.size + eps
    pb = np.histogram(b, edges)[0] / b.size + eps
    pa /= pa.sum()
    pb /= pb.sum()
    return float(np.sum(pa * np.log(pa / pb)))


def noise_kl(noise_a, noise_b, region=None, bins: int = 64, eps: float = 1e-8) -> float:
    """KL between the noise distributions of two volumes inside ``region``.

    Pass the reference (original) image's noise as ``noise_a``.
    """
    return histogram_kl(_values(noise_a, region), _values(noise_b, region), bins, eps)
