import gzip
import json

import nibabel as nib
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from brainrefine.volume import (Volume, VolumeError, build_patch_grid, center_crop_offsets, crop_center,
                                extract_patch, insert_patch, list_volumes, load_labels, load_volume,
                                normalize_intensity, read_sidecar, save_labels, save_volume)


def test_normalize_endpoints_and_clip():
    v = Volume(np.array([10.0, 20.0, 30.0, 40.0]).reshape(1, 1, 4))
    out = normalize_intensity(v, 10.0, 30.0).data.ravel()
    assert out.dtype == np.float32
    np.testing.assert_array_equal(out, [-1.0, 0.0, 1.0, 1.0])


def test_normalize_rejects_empty_range():
    with pytest.raises(ValueError):
        normalize_intensity(Volume(np.zeros((2, 2, 2))), 1.0, 1.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1, 1, allow_nan=False, width=32), min_size=8, max_size=8))
def test_normalize_idempotent_on_unit_range(vals):
    v = Volume(np.array(vals, dtype=np.float32).reshape(2, 2, 2))
    once = normalize_intensity(v, -1.0, 1.0)
    twice = normalize_intensity(once, -1.0, 1.0)
    np.testing.assert_array_equal(once.data, twice.data)


def test_crop_identity_and_symmetric():
    v = Volume(np.random.default_rng(0).normal(size=(10, 10, 10)))
    np.testing.assert_array_equal(crop_center(v, (10, 10, 10)).data, v.data)
    assert center_crop_offsets((6, 6, 6), (4, 4, 4)) == (1, 1, 1)


def test_crop_odd_remainder_goes_high():
    # brute force: the offset o must leave floor(r/2) voxels below and ceil(r/2) above
    for n in range(1, 12):
        for t in range(1, n + 1):
            r = n - t
            candidates = [o for o in range(r + 1) if (r - o) - o in (0, 1)]
            assert center_crop_offsets((n,), (t,)) == (candidates[0],)
    assert center_crop_offsets((7, 7, 7), (4, 4, 4)) == (1, 1, 1)


def test_crop_too_large():
    with pytest.raises(ValueError):
        crop_center(Volume(np.zeros((4, 4, 4))), (5, 4, 4))


def test_grid_examples():
    assert build_patch_grid((64, 64, 64), 64, 32).origins == [(0, 0, 0)]
    g = build_patch_grid((96, 96, 96), 64, 32)
    assert g.axis_origins[0] == (0, 32) and len(g) == 8
    assert build_patch_grid((100, 100, 100), 64, 32).axis_origins[0] == (0, 32, 36)
    assert build_patch_grid((32, 32, 32), 16).stride == 8


def test_grid_errors():
    with pytest.raises(ValueError):
        build_patch_grid((16, 16, 15), 16, 8)
    with pytest.raises(ValueError):
        build_patch_grid((32, 32, 32), 16, 0)


@settings(max_examples=60, deadline=None)
@given(st.tuples(st.integers(4, 40), st.integers(4, 40), st.integers(4, 40)), st.integers(1, 4), st.data())
def test_grid_covers_every_voxel(shape, p, data):
    p = min(p * 4, min(shape))
    s = data.draw(st.integers(1, p))
    g = build_patch_grid(shape, p, s)
    cover = np.zeros(shape, dtype=int)
    for o in g.origins:
        assert all(0 <= a <= n - p for a, n in zip(o, shape))
        cover[o[0]:o[0] + p, o[1]:o[1] + p, o[2]:o[2] + p] += 1
    assert cover.min() >= 1
    for ax, n in zip(g.axis_origins, shape):
        assert ax[-1] == n - p
        assert all(a % s == 0 for a in ax[:-1])


def test_extract_insert_roundtrip():
    rng = np.random.default_rng(1)
    vol = rng.normal(size=(12, 12, 12)).astype(np.float32)
    patch = extract_patch(Volume(vol), (2, 3, 4), 6)
    canvas = np.zeros_like(vol)
    insert_patch(canvas, (2, 3, 4), patch, np.ones((6, 6, 6), bool))
    np.testing.assert_array_equal(canvas[2:8, 3:9, 4:10], vol[2:8, 3:9, 4:10])
    before = canvas.copy()
    insert_patch(canvas, (0, 0, 0), patch + 5, np.zeros((6, 6, 6), bool))
    np.testing.assert_array_equal(canvas, before)


def test_insert_disjoint_regions_write_once():
    counts = np.zeros((10, 10, 10), dtype=int)
    first = np.ones((6, 6, 6), bool)
    insert_patch(counts, (0, 0, 0), np.ones((6, 6, 6), int), first)
    covered = counts > 0
    second = ~covered[3:9, 3:9, 3:9]
    view = counts[3:9, 3:9, 3:9].copy()
    insert_patch(counts, (3, 3, 3), view + 1, second)
    assert counts.max() == 1


def test_patch_bounds():
    with pytest.raises(ValueError):
        extract_patch(np.zeros((8, 8, 8)), (4, 0, 0), 6)
    with pytest.raises(ValueError):
        insert_patch(np.zeros((8, 8, 8)), (-1, 0, 0), np.zeros((4, 4, 4)), np.ones((4, 4, 4), bool))


def test_raw_roundtrip(tmp_path):
    data = np.random.default_rng(2).uniform(-1, 1, (5, 6, 7)).astype(np.float32)
    save_volume(Volume(data, (0.7, 0.8, 0.9), (-1.0, 1.0)), tmp_path / "a", seed=11)
    meta = read_sidecar(tmp_path / "a")
    assert meta["shape"] == [5, 6, 7] and meta["seed"] == 11 and meta["intensity_range"] == [-1.0, 1.0]
    assert (tmp_path / "a.f32raw").stat().st_size == data.size * 4
    back = load_volume(tmp_path / "a.f32raw")
    np.testing.assert_array_equal(back.data, data)
    assert back.spacing == pytest.approx((0.7, 0.8, 0.9))
    assert list_volumes(tmp_path) == ["a"]


def test_raw_errors_name_fields(tmp_path):
    save_volume(Volume(np.zeros((2, 2, 2), np.float32)), tmp_path / "b")
    meta = json.loads((tmp_path / "b.json").read_text())
    meta["shape"] = [3, 2, 2]
    (tmp_path / "b.json").write_text(json.dumps(meta))
    with pytest.raises(VolumeError, match="shape"):
        load_volume(tmp_path / "b")
    np.array([0, np.nan, 0, 0, 0, 0, 0, np.inf, 0, 0, 0, 0], dtype="<f4").tofile(tmp_path / "b.f32raw")
    with pytest.raises(VolumeError, match="2 non-finite"):
        load_volume(tmp_path / "b")
    with pytest.raises(VolumeError, match="sidecar"):
        load_volume(tmp_path / "missing")


def test_labels_roundtrip(tmp_path):
    lab = np.random.default_rng(3).integers(0, 5, (4, 4, 4)).astype(np.uint8)
    save_volume(Volume(np.zeros((4, 4, 4), np.float32)), tmp_path / "c")
    save_labels(lab, tmp_path / "c")
    np.testing.assert_array_equal(load_labels(tmp_path / "c"), lab)


def test_nifti_float32_and_scaled_int16(tmp_path):
    data = np.random.default_rng(4).normal(size=(4, 5, 6)).astype(np.float32)
    img = nib.Nifti1Image(data, np.diag([0.7, 0.8, 0.9, 1.0]))
    nib.save(img, tmp_path / "f.nii")
    v = load_volume(tmp_path / "f.nii")
    np.testing.assert_array_equal(v.data, data)
    assert v.spacing == pytest.approx((0.7, 0.8, 0.9))

    raw = np.arange(24, dtype=np.int16).reshape(2, 3, 4)
    img = nib.Nifti1Image(raw, np.eye(4))
    img.header.set_data_dtype(np.int16)
    img.header.set_slope_inter(2.0, -3.0)
    nib.save(img, tmp_path / "i.nii.gz")
    with gzip.open(tmp_path / "i.nii.gz") as fh:
        assert fh.read(4)  # really gzip
    v = load_volume(tmp_path / "i.nii.gz")
    np.testing.assert_allclose(v.data, raw * 2.0 - 3.0)


def test_nifti_rejects_other_dtypes(tmp_path):
    nib.save(nib.Nifti1Image(np.zeros((2, 2, 2), np.uint8), np.eye(4)), tmp_path / "u.nii")
    with pytest.raises(VolumeError, match="datatype"):
        load_volume(tmp_path / "u.nii")
