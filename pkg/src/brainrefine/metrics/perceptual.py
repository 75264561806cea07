"""Patch-level perceptual distance and patch feature sets.

Both need a backbone: any callable mapping a float tensor of shape
(B, 1, h, w) in [-1, 1] to a list of feature maps (B, C_l, h_l, w_l).
``RandomConvBackbone`` is a fixed-seed, training-free default; a pretrained
network can be wrapped with ``TorchvisionBackbone``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..volume import Volume


class BackboneMissing(RuntimeError):
    pass


class RandomConvBackbone(nn.Module):
    """Conv -> ReLU -> 2x average-pool stages with frozen He-initialized weights."""

    def __init__(self, channels: Sequence[int] = (16, 32, 64), kernel: int = 3, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.channels = tuple(channels)
        self.seed = seed
        self.convs = nn.ModuleList()
        cin = 1
        for c in self.channels:
            conv = nn.Conv2d(cin, c, kernel, padding=kernel // 2, bias=False)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / (cin * kernel * kernel)) ** 0.5)
            conv.requires_grad_(False)
            self.convs.append(conv)
            cin = c

    def tag(self) -> str:
        return f"random-conv{list(self.channels)}-seed{self.seed}"

    @torch.no_grad()
    def forward(self, x) -> List[torch.Tensor]:
        feats = []
        h = x
        for i, conv in enumerate(self.convs):
            h = F.relu(conv(h))
            feats.append(h)
            if i < len(self.convs) - 1:
                h = F.avg_pool2d(h, 2)
        return feats


class TorchvisionBackbone(nn.Module):
    """Adapter for a pretrained torchvision feature stack (e.g. AlexNet ``features``).

    ``taps`` are the indices of modules whose outputs are returned.
    Grayscale input is repeated to three channels and ImageNet-normalized.
    """

    def __init__(self, features: nn.Module, taps: Sequence[int], name: str = "torchvision"):
        super().__init__()
        self.features = features.eval()
        self.taps = set(taps)
        self.name = name
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))

    def tag(self) -> str:
        return self.name

    @torch.no_grad()
    def forward(self, x):
        h = ((x.repeat(1, 3, 1, 1) + 1) / 2 - self.mean) / self.std
        out = []
        for i, layer in enumerate(self.features):
            h = layer(h)
            if i in self.taps:
                out.append(h)
        return out


def _require(backbone):
    if backbone is None:
        raise BackboneMissing("a perceptual backbone must be supplied (e.g. RandomConvBackbone())")
    return backbone


def _unit(f, eps=1e-10):
    return f / (torch.sqrt(torch.sum(f**2, dim=1, keepdim=True)) + eps)


def sample_slice_patches(shape, axis: int, patch: int, n: int, seed) -> np.ndarray:
    """``n`` rows of (slice index, row origin, col origin) for 2D patches
    perpendicular to ``axis``."""
    if axis not in (0, 1, 2):
        raise ValueError(f"axis must be 0, 1 or 2, got {axis}")
    plane = [s for i, s in enumerate(shape) if i != axis]
    if patch > min(plane):
        raise ValueError(f"patch {patch} does not fit slices of shape {plane}")
    rng = np.random.default_rng(seed)
    k = rng.integers(0, shape[axis], size=n)
    r = rng.integers(0, plane[0] - patch + 1, size=n)
    c = rng.integers(0, plane[1] - patch + 1, size=n)
    return np.stack([k, r, c], axis=1)


def gather_patches(data: np.ndarray, axis: int, locs: np.ndarray, patch: int) -> np.ndarray:
    moved = np.moveaxis(np.asarray(data, dtype=np.float32), axis, 0)
    return np.stack([moved[k, r:r + patch, c:c + patch] for k, r, c in locs])


@torch.no_grad()
def perceptual_distance(a: np.ndarray, b: np.ndarray, backbone, batch: int = 256) -> np.ndarray:
    """Per-pair distance: sum over layers of the spatial mean of squared
    differences between channel-normalized feature maps."""
    backbone = _require(backbone)
    out = []
    for i in range(0, len(a), batch):
        fa = backbone(torch.from_numpy(np.ascontiguousarray(a[i:i + batch]))[:, None])
        fb = backbone(torch.from_numpy(np.ascontiguousarray(b[i:i + batch]))[:, None])
        d = sum(((_unit(x) - _unit(y)) ** 2).sum(dim=1).mean(dim=(1, 2)) for x, y in zip(fa, fb))
        out.append(d.double().numpy())
    return np.concatenate(out)


def lpips_patches(orig, other, n: int = 1000, patch: int = 64, axis: int = 0, backbone=None, seed=0) -> float:
    """Mean perceptual distance over ``n`` shared 2D patch locations on
    slices perpendicular to ``axis``."""
    backbone = _require(backbone)
    da = np.asarray(orig.data if isinstance(orig, Volume) else orig)
    db = np.asarray(other.data if isinstance(other, Volume) else other)
    if da.shape != db.shape:
        raise ValueError(f"shape mismatch {da.shape} vs {db.shape}")
    locs = sample_slice_patches(da.shape, axis, patch, n, seed)
    return float(perceptual_distance(gather_patches(da, axis, locs, patch), gather_patches(db, axis, locs, patch),
                                     backbone).mean())


@dataclass
class FeatureSet:
    features: np.ndarray
    extractor: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError(f"features must be a 2D matrix, got shape {self.features.shape}")
        if not np.isfinite(self.features).all():
            raise ValueError("features contain non-finite values")


@torch.no_grad()
def patch_features(volumes: Sequence, axis: int, patch: int, n_per_volume: int, backbone, seed=0,
                   batch: int = 256) -> FeatureSet:
    """Spatially averaged backbone activations (all layers concatenated) of
    ``n_per_volume`` random 2D patches per volume; locations depend only on
    (seed, volume position in the list)."""
    backbone = _require(backbone)
    rows = []
    for i, v in enumerate(volumes):
        data = np.asarray(v.data if isinstance(v, Volume) else v)
        locs = sample_slice_patches(data.shape, axis, patch, n_per_volume, [int(seed), i])
        patches = gather_patches(data, axis, locs, patch)
        for j in range(0, len(patches), batch):
            feats = backbone(torch.from_numpy(patches[j:j + batch])[:, None])
            rows.append(torch.cat([f.mean(dim=(2, 3)) for f in feats], dim=1).double().numpy())
    tag = backbone.tag() if hasattr(backbone, "tag") else type(backbone).__name__
    return FeatureSet(np.concatenate(rows), tag)
