"""Histogram-of-oriented-gradients descriptors and slice-wise textural distance."""
from __future__ import annotations

import numpy as np

from ..volume import RegionMask, Volume

_EPS = 1e-5


def hog_descriptor(plane, cell: int = 8, orient_bins: int = 9, block: int = 2) -> np.ndarray:
    """Dalal-Triggs HOG of a 2D array.

    Central-difference gradients (zero on the border rows/columns), unsigned
    orientation hard-binned over [0, 180) degrees, per-cell mean magnitude,
    ``block x block`` cell blocks at one-cell stride normalized with L2-Hys.
    Planes with fewer than ``block`` cells along an axis use a smaller block
    along that axis.
    """
    img = np.asarray(plane, dtype=np.float64)
    if img.ndim != 2 or min(img.shape) < cell:
        raise ValueError(f"HOG needs a 2D plane of at least {cell}x{cell}, got shape {img.shape}")
    g_row = np.zeros_like(img)
    g_col = np.zeros_like(img)
    g_row[1:-1, :] = img[2:, :] - img[:-2, :]
    g_col[:, 1:-1] = img[:, 2:] - img[:, :-2]
    mag = np.hypot(g_col, g_row)
    ori = np.rad2deg(np.arctan2(g_row, g_col)) % 180.0
    width = 180.0 / orient_bins
    bins = np.minimum((ori / width).astype(np.int64), orient_bins - 1)

    n_r, n_c = img.shape[0] // cell, img.shape[1] // cell
    mag = mag[: n_r * cell, : n_c * cell]
    bins = bins[: n_r * cell, : n_c * cell]
    cell_r = np.repeat(np.arange(n_r), cell)[:, None]
    cell_c = np.repeat(np.arange(n_c), cell)[None, :]
    flat = (cell_r * n_c + cell_c) * orient_bins + bins
    hist = np.bincount(flat.ravel(), weights=mag.ravel(), minlength=n_r * n_c * orient_bins)
    hist = hist.reshape(n_r, n_c, orient_bins) / (cell * cell)

    b_r, b_c = min(block, n_r), min(block, n_c)
    out = []
    for r in range(n_r - b_r + 1):
        for c in range(n_c - b_c + 1):
            blk = hist[r:r + b_r, c:c + b_c]
            blk = blk / np.sqrt(np.sum(blk**2) + _EPS**2)
            blk = np.minimum(blk, 0.2)
            blk = blk / np.sqrt(np.sum(blk**2) + _EPS**2)
            out.append(blk.ravel())
    return np.concatenate(out)


def region_bbox(mask: np.ndarray):
    idx = np.nonzero(mask)
    return tuple(slice(int(i.min()), int(i.max()) + 1) for i in idx)


def hog_similarity(a, b, region, axis: int, cell: int = 8, orient_bins: int = 9) -> float:
    """Mean L2 distance between HOG descriptors of corresponding slices.

    Slices run perpendicular to ``axis`` through the region's bounding box;
    each slice is cropped to the in-plane bounding box. Slices whose crop is
    smaller than one cell are skipped.
    """
    da = np.asarray(a.data if isinstance(a, Volume) else a)
    db = np.asarray(b.data if isinstance(b, Volume) else b)
    if da.shape != db.shape:
        raise ValueError(f"shape mismatch {da.shape} vs {db.shape}")
    m = region.data if isinstance(region, RegionMask) else np.asarray(region, dtype=bool)
    if m.shape != da.shape:
        raise ValueError(f"region shape {m.shape} does not match volume shape {da.shape}")
    if not m.any():
        raise ValueError("region is empty")
    if axis not in (0, 1, 2):
        raise ValueError(f"axis must be 0, 1 or 2, got {axis}")
    box = region_bbox(m)
    in_plane = tuple(s for i, s in enumerate(box) if i != axis)
    if min(s.stop - s.start for s in in_plane) < cell:
        raise ValueError(f"region bounding box {[(s.start, s.stop) for s in box]} is smaller than one HOG cell ({cell})")
    dists = []
    for k in range(box[axis].start, box[axis].stop):
        if not np.take(m, k, axis=axis).any():
            continue
        pa = np.take(da, k, axis=axis)[in_plane]
        pb = np.take(db, k, axis=axis)[in_plane]
        dists.append(np.linalg.norm(hog_descriptor(pa, cell, orient_bins) - hog_descriptor(pb, cell, orient_bins)))
    return float(np.mean(dists))
