"""Volumes, intensity normalization, patch geometry and file I/O.

Two on-disk formats are understood:

* the raw phantom format: ``<name>.f32raw`` holding little-endian float32
  voxels in C order (D, H, W), next to a ``<name>.json`` sidecar with keys
  ``shape``, ``spacing``, ``intensity_range`` and ``seed``;
* NIfTI-1 (``.nii`` / ``.nii.gz``), read only, for real scans.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np

PathLike = Union[str, os.PathLike]

RAW_SUFFIX = ".f32raw"
SIDECAR_SUFFIX = ".json"
LABELS_SUFFIX = ".labels.u8raw"


class VolumeError(ValueError):
    """Raised when a volume file cannot be read or violates its contract."""


@dataclass
class Volume:
    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    intensity_range: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be 3 positive values, got {self.spacing}")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.data.shape

    def with_data(self, data: np.ndarray, intensity_range=None) -> "Volume":
        return Volume(data, self.spacing, intensity_range if intensity_range is not None else self.intensity_range)


@dataclass
class RegionMask:
    data: np.ndarray
    label: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=bool)

    def check(self, shape) -> "RegionMask":
        if self.data.shape != tuple(shape):
            raise ValueError(f"region {self.label!r} has shape {self.data.shape}, expected {tuple(shape)}")
        if not self.data.any():
            raise ValueError(f"region {self.label!r} is empty")
        return self


@dataclass
class PatchGrid:
    volume_shape: Tuple[int, int, int]
    patch_size: int
    stride: int
    axis_origins: Tuple[Tuple[int, ...], ...]
    origins: list = field(default_factory=list)

    @property
    def counts(self) -> Tuple[int, int, int]:
        return tuple(len(a) for a in self.axis_origins)

    def __len__(self):
        return len(self.origins)


# ---------------------------------------------------------------------------
# intensity / geometry
# ---------------------------------------------------------------------------

def normalize_intensity(v: Volume, lo: float, hi: float) -> Volume:
    """Affinely map ``lo -> -1`` and ``hi -> +1``, clipping everything else."""
    if not lo < hi:
        raise ValueError(f"normalize_intensity needs lo < hi, got lo={lo}, hi={hi}")
    data = (np.asarray(v.data, dtype=np.float64) - lo) * (2.0 / (hi - lo)) - 1.0
    data = np.clip(data, -1.0, 1.0).astype(np.float32)
    return Volume(data, v.spacing, (-1.0, 1.0))


def center_crop_offsets(shape: Sequence[int], target: Sequence[int]) -> Tuple[int, ...]:
    """Low-side offsets for a centered crop; odd remainders leave the extra voxel on the high side."""
    if len(shape) != len(target):
        raise ValueError(f"rank mismatch: {tuple(shape)} vs {tuple(target)}")
    offsets = []
    for n, t in zip(shape, target):
        if t > n or t < 1:
            raise ValueError(f"cannot crop axis of size {n} to {t}")
        offsets.append((n - t) // 2)
    return tuple(offsets)


def crop_center(v: Volume, shape: Sequence[int]) -> Volume:
    off = center_crop_offsets(v.shape, shape)
    sl = tuple(slice(o, o + t) for o, t in zip(off, shape))
    return Volume(v.data[sl].copy(), v.spacing, v.intensity_range)


def _axis_origins(n: int, p: int, s: int) -> Tuple[int, ...]:
    origins = set(range(0, n - p + 1, s))
    origins.add(n - p)
    return tuple(sorted(origins))


def build_patch_grid(volume_shape: Sequence[int], patch_size: int, stride: Optional[int] = None) -> PatchGrid:
    """Cubic patches at multiples of ``stride``; the last origin per axis is
    clamped so that the final patch ends exactly at the boundary.

    ``stride`` defaults to half the patch size.
    """
    volume_shape = tuple(int(n) for n in volume_shape)
    if len(volume_shape) != 3:
        raise ValueError(f"volume_shape must have 3 entries, got {volume_shape}")
    p = int(patch_size)
    s = max(p // 2, 1) if stride is None else int(stride)
    if p < 1 or p > min(volume_shape):
        raise ValueError(f"patch size {p} does not fit volume shape {volume_shape}")
    if not 0 < s <= p:
        raise ValueError(f"stride must satisfy 0 < stride <= patch_size, got {s}")
    per_axis = tuple(_axis_origins(n, p, s) for n in volume_shape)
    origins = [(a, b, c) for a in per_axis[0] for b in per_axis[1] for c in per_axis[2]]
    return PatchGrid(volume_shape, p, s, per_axis, origins)


def _check_box(shape, origin, p):
    if len(origin) != 3 or any(o < 0 or o + p > n for o, n in zip(origin, shape)):
        raise ValueError(f"patch at origin {tuple(origin)} of size {p} is out of bounds for shape {tuple(shape)}")


def patch_slices(origin: Sequence[int], p: int) -> Tuple[slice, slice, slice]:
    return tuple(slice(int(o), int(o) + p) for o in origin)


def extract_patch(v, origin: Sequence[int], p: int) -> np.ndarray:
    data = v.data if isinstance(v, Volume) else np.asarray(v)
    _check_box(data.shape, origin, p)
    return data[patch_slices(origin, p)].copy()


def insert_patch(canvas: np.ndarray, origin: Sequence[int], patch: np.ndarray, region: np.ndarray) -> np.ndarray:
    """Write ``patch`` into ``canvas`` in place, only where ``region`` is true."""
    patch = np.asarray(patch)
    region = np.asarray(region, dtype=bool)
    p = patch.shape[0]
    if patch.shape != (p, p, p) or region.shape != patch.shape:
        raise ValueError(f"patch {patch.shape} and region {region.shape} must be equal cubes")
    _check_box(canvas.shape, origin, p)
    view = canvas[patch_slices(origin, p)]
    view[region] = patch[region]
    return canvas


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------

def _stem(path: Path) -> Path:
    name = path.name
    for suffix in (LABELS_SUFFIX, RAW_SUFFIX, SIDECAR_SUFFIX):
        if name.endswith(suffix):
            return path.with_name(name[: -len(suffix)])
    return path


def _check_finite(data: np.ndarray, path) -> None:
    bad = int(np.count_nonzero(~np.isfinite(data)))
    if bad:
        raise VolumeError(f"{path}: data contains {bad} non-finite voxel(s)")


def save_volume(v: Volume, path: PathLike, seed: Optional[int] = None, extra: Optional[dict] = None) -> Path:
    """Write ``v`` in the raw phantom format; returns the sidecar path."""
    stem = _stem(Path(path))
    stem.parent.mkdir(parents=True, exist_ok=True)
    data = np.ascontiguousarray(v.data, dtype="<f4")
    _check_finite(data, stem)
    data.tofile(stem.with_name(stem.name + RAW_SUFFIX))
    meta = {
        "shape": list(data.shape),
        "spacing": list(v.spacing),
        "intensity_range": list(v.intensity_range) if v.intensity_range is not None else None,
        "seed": seed,
    }
    if extra:
        meta.update(extra)
    sidecar = stem.with_name(stem.name + SIDECAR_SUFFIX)
    sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return sidecar


def read_sidecar(path: PathLike) -> dict:
    stem = _stem(Path(path))
    return json.loads(stem.with_name(stem.name + SIDECAR_SUFFIX).read_text())


def _load_raw(stem: Path) -> Volume:
    raw = stem.with_name(stem.name + RAW_SUFFIX)
    sidecar = stem.with_name(stem.name + SIDECAR_SUFFIX)
    try:
        meta = json.loads(sidecar.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise VolumeError(f"{sidecar}: unreadable sidecar ({exc})") from exc
    try:
        shape = tuple(int(n) for n in meta["shape"])
        spacing = tuple(float(s) for s in meta.get("spacing") or (1.0, 1.0, 1.0))
    except (KeyError, TypeError, ValueError) as exc:
        raise VolumeError(f"{sidecar}: bad 'shape' or 'spacing' field ({exc})") from exc
    if len(shape) != 3:
        raise VolumeError(f"{sidecar}: 'shape' must have 3 entries, got {list(shape)}")
    try:
        data = np.fromfile(raw, dtype="<f4")
    except OSError as exc:
        raise VolumeError(f"{raw}: unreadable raw file ({exc})") from exc
    if data.size != int(np.prod(shape)):
        raise VolumeError(f"{raw}: 'shape' {list(shape)} needs {int(np.prod(shape))} floats, file holds {data.size}")
    _check_finite(data, raw)
    rng = meta.get("intensity_range")
    try:
        return Volume(data.reshape(shape).astype(np.float32), spacing, tuple(rng) if rng else None)
    except ValueError as exc:
        raise VolumeError(f"{sidecar}: 'spacing' invalid ({exc})") from exc


def _load_nifti(path: Path) -> Volume:
    import nibabel as nib

    try:
        img = nib.load(str(path))
    except Exception as exc:  # nibabel raises a zoo of types
        raise VolumeError(f"{path}: unreadable NIfTI file ({exc})") from exc
    dtype = img.get_data_dtype()
    if dtype not in (np.dtype("float32"), np.dtype("int16"), np.dtype("<f4"), np.dtype("<i2"), np.dtype(">f4"), np.dtype(">i2")):
        raise VolumeError(f"{path}: unsupported 'datatype' {dtype} (float32 or int16 expected)")
    if len(img.shape) != 3:
        raise VolumeError(f"{path}: 'dim' describes shape {img.shape}, expected 3D")
    data = np.asarray(img.get_fdata(dtype=np.float64))  # applies scl_slope / scl_inter
    _check_finite(data, path)
    spacing = tuple(float(z) for z in img.header.get_zooms()[:3])
    try:
        return Volume(data.astype(np.float32), spacing, None)
    except ValueError as exc:
        raise VolumeError(f"{path}: 'pixdim' invalid ({exc})") from exc


def load_volume(path: PathLike) -> Volume:
    """Load a phantom-format or NIfTI-1 volume without touching intensities."""
    path = Path(path)
    if path.name.endswith((".nii", ".nii.gz")):
        return _load_nifti(path)
    stem = _stem(path)
    if not stem.with_name(stem.name + SIDECAR_SUFFIX).exists():
        raise VolumeError(f"{path}: no sidecar {stem.name + SIDECAR_SUFFIX} found")
    return _load_raw(stem)


def save_labels(labels: np.ndarray, path: PathLike) -> Path:
    stem = _stem(Path(path))
    out = stem.with_name(stem.name + LABELS_SUFFIX)
    np.ascontiguousarray(labels, dtype=np.uint8).tofile(out)
    return out


def load_labels(path: PathLike, shape: Optional[Sequence[int]] = None) -> np.ndarray:
    stem = _stem(Path(path))
    if shape is None:
        shape = read_sidecar(stem)["shape"]
    src = stem.with_name(stem.name + LABELS_SUFFIX)
    data = np.fromfile(src, dtype=np.uint8)
    if data.size != int(np.prod(shape)):
        raise VolumeError(f"{src}: label file holds {data.size} bytes, 'shape' {list(shape)} needs {int(np.prod(shape))}")
    return data.reshape(tuple(shape))


def list_volumes(directory: PathLike) -> list:
    """Sorted ids (file stems) of all phantom-format volumes in ``directory``."""
    directory = Path(directory)
    return sorted(p.name[: -len(RAW_SUFFIX)] for p in directory.glob("*" + RAW_SUFFIX))
