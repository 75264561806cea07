"""Deterministic synthetic brain phantoms.

A phantom is a stack of nested, smoothly deformed ellipsoids (head, skull
shell, gray matter, white matter, two ventricles) with piecewise-constant
intensities, a band-limited texture inside the tissue labels and i.i.d.
Gaussian noise everywhere. All intensities are expressed directly in the
normalized [-1, 1] range.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .volume import RegionMask, Volume, save_labels, save_volume

BACKGROUND, SKULL, WHITE_MATTER, GRAY_MATTER, VENTRICLE = range(5)
LABEL_NAMES = {
    BACKGROUND: "background",
    SKULL: "skull",
    WHITE_MATTER: "white-matter",
    GRAY_MATTER: "gray-matter",
    VENTRICLE: "ventricle",
}
BASE_INTENSITY = {
    BACKGROUND: -0.9,
    SKULL: -0.3,
    WHITE_MATTER: 0.55,
    GRAY_MATTER: 0.15,
    VENTRICLE: -0.55,
}
TEXTURE_SIGMA = 1.5  # Gaussian-smoothed white noise, correlation length 2*sigma = 3 voxels
SPACING = (0.7, 0.7, 0.7)


@dataclass
class Phantom:
    volume: Volume
    labels: np.ndarray
    noise_sigma: float
    seed: int
    cerebellum: np.ndarray = field(repr=False, default=None)

    def region(self, name: str) -> RegionMask:
        """Region masks by name: any label name, ``whole-brain`` or ``cerebellum``."""
        return region_from_labels(self.labels, name, self.cerebellum)


def region_from_labels(labels: np.ndarray, name: str, cerebellum: np.ndarray = None) -> RegionMask:
    if name == "whole-brain":
        data = np.isin(labels, (WHITE_MATTER, GRAY_MATTER, VENTRICLE))
    elif name == "cerebellum":
        data = cerebellum if cerebellum is not None else cerebellum_from_labels(labels)
    else:
        ids = [k for k, v in LABEL_NAMES.items() if v == name]
        if not ids:
            raise KeyError(f"unknown region {name!r}")
        data = labels == ids[0]
    return RegionMask(data, name)


def cerebellum_from_labels(labels: np.ndarray) -> np.ndarray:
    """Tissue in the inferior-posterior part of the brain bounding box.

    Stands in for a cerebellum label; axis 0 runs inferior to superior and
    axis 1 posterior to anterior.
    """
    tissue = np.isin(labels, (WHITE_MATTER, GRAY_MATTER))
    out = np.zeros_like(tissue)
    if not tissue.any():
        return out
    idx = np.nonzero(tissue)
    lo = [int(i.min()) for i in idx]
    hi = [int(i.max()) + 1 for i in idx]
    cut0 = lo[0] + (hi[0] - lo[0]) * 3 // 10
    cut1 = lo[1] + (hi[1] - lo[1]) * 4 // 10
    out[: max(cut0, lo[0] + 1), : max(cut1, lo[1] + 1), :] = True
    return out & tissue


def _smooth_field(rng, shape, sigma) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return f / (np.abs(f).max() + 1e-12)


def generate_phantom(
    seed: int,
    shape: Sequence[int] = (48, 48, 48),
    noise_sigma: float = 0.05,
    texture_amp: float = 0.1,
) -> Phantom:
    shape = tuple(int(n) for n in shape)
    if len(shape) != 3 or min(shape) < 16:
        raise ValueError(f"phantom shape must be 3 axes of at least 16 voxels, got {shape}")
    if noise_sigma < 0 or texture_amp < 0:
        raise ValueError("noise_sigma and texture_amp must be non-negative")
    rng = np.random.default_rng(seed)
    n = min(shape)

    axes = [(np.arange(k) + 0.5) / k * 2.0 - 1.0 for k in shape]
    u = np.stack(np.meshgrid(*axes, indexing="ij"))
    centre = rng.uniform(-0.03, 0.03, size=3)
    radii = np.array([0.93, 0.88, 0.91]) * rng.uniform(0.95, 1.05, size=3)
    warp = np.stack([_smooth_field(rng, shape, n / 6.0) for _ in range(3)]) * 0.06
    q = (u - centre[:, None, None, None] + warp) / radii[:, None, None, None]
    r = np.sqrt((q**2).sum(axis=0))

    fold = _smooth_field(rng, shape, n / 14.0)
    wm_radius = 0.62 * rng.uniform(0.95, 1.05) + 0.09 * fold

    labels = np.full(shape, BACKGROUND, dtype=np.uint8)
    labels[r <= 1.0] = SKULL
    labels[r <= 0.87] = GRAY_MATTER
    labels[r <= wm_radius] = WHITE_MATTER
    vr = np.array([0.24, 0.32, 0.16]) * rng.uniform(0.9, 1.1, size=3)
    for side in (-1.0, 1.0):
        vc = np.array([0.05, 0.0, side * 0.17])
        d = np.sqrt((((q - vc[:, None, None, None]) / vr[:, None, None, None]) ** 2).sum(axis=0))
        labels[d <= 1.0] = VENTRICLE

    data = np.zeros(shape, dtype=np.float64)
    for lab, base in BASE_INTENSITY.items():
        data[labels == lab] = base + rng.uniform(-0.03, 0.03)

    texture = ndimage.gaussian_filter(rng.standard_normal(shape), TEXTURE_SIGMA, mode="wrap")
    texture /= texture.std() + 1e-12
    tissue = np.isin(labels, (WHITE_MATTER, GRAY_MATTER))
    data[tissue] += texture_amp * texture[tissue]

    data += noise_sigma * rng.standard_normal(shape)
    data = np.clip(data, -1.0, 1.0).astype(np.float32)

    cereb = cerebellum_from_labels(labels)
    return Phantom(Volume(data, SPACING, (-1.0, 1.0)), labels, float(noise_sigma), int(seed), cereb)


@dataclass
class DatasetSplit:
    train_ids: list
    test_ids: list
    fractions: Tuple[float, float] = (0.8, 0.2)

    def __post_init__(self):
        if set(self.train_ids) & set(self.test_ids):
            raise ValueError("train and test ids overlap")
        if not math.isclose(sum(self.fractions), 1.0):
            raise ValueError(f"split fractions must sum to 1, got {self.fractions}")


def split_counts(n: int, fracs=(0.8, 0.2)) -> Tuple[int, int]:
    """Train count is floored; the remainder goes to test."""
    n_train = int(math.floor(n * fracs[0] + 1e-9))
    return n_train, n - n_train


def phantom_id(seed: int) -> str:
    return f"phantom_{seed:05d}"


def make_dataset(
    out_dir,
    n: int,
    shape: Sequence[int] = (48, 48, 48),
    noise_sigma: float = 0.05,
    texture_amp: float = 0.1,
    split_fracs=(0.8, 0.2),
    base_seed: int = 0,
) -> DatasetSplit:
    """Write ``n`` phantoms to ``out_dir/train`` and ``out_dir/test``.

    Seeds are ``base_seed .. base_seed + n - 1``; the first ``floor(0.8 n)``
    seeds (for the default fractions) form the training split.
    """
    if n < 2:
        raise ValueError(f"need at least 2 phantoms, got n={n}")
    out_dir = Path(out_dir)
    seeds = [base_seed + i for i in range(n)]
    n_train, _ = split_counts(n, split_fracs)
    split = DatasetSplit(seeds[:n_train], seeds[n_train:], tuple(float(f) for f in split_fracs))
    for part, ids in (("train", split.train_ids), ("test", split.test_ids)):
        for seed in ids:
            ph = generate_phantom(seed, shape, noise_sigma, texture_amp)
            stem = out_dir / part / phantom_id(seed)
            try:
                save_volume(ph.volume, stem, seed=seed, extra={"noise_sigma": noise_sigma, "texture_amp": texture_amp})
                save_labels(ph.labels, stem)
            except OSError as exc:
                raise OSError(f"failed to write phantom to {stem}: {exc}") from exc
    manifest = {
        "train_ids": split.train_ids,
        "test_ids": split.test_ids,
        "fractions": list(split.fractions),
        "shape": list(shape),
        "noise_sigma": noise_sigma,
        "texture_amp": texture_amp,
        "labels": {str(k): v for k, v in LABEL_NAMES.items()},
    }
    (out_dir / "split.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return split
