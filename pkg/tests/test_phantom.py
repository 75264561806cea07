import hashlib
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from brainrefine.metrics import extract_noise, laplacian_variance_sharpness
from brainrefine.phantom import (GRAY_MATTER, LABEL_NAMES, VENTRICLE, WHITE_MATTER, generate_phantom, make_dataset,
                                 split_counts)
from brainrefine.volume import list_volumes, load_labels, load_volume


def _wm_core(ph, erode=3):
    return ndimage.binary_erosion(ph.labels == WHITE_MATTER, iterations=erode)


def test_deterministic():
    a = generate_phantom(7, (48, 48, 48), 0.05, 0.1)
    b = generate_phantom(7, (48, 48, 48), 0.05, 0.1)
    np.testing.assert_array_equal(a.volume.data, b.volume.data)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert not np.array_equal(a.volume.data, generate_phantom(8, (48, 48, 48)).volume.data)


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([(16, 16, 16), (24, 20, 16), (32, 32, 32)]))
def test_labels_partition_volume(seed, shape):
    ph = generate_phantom(seed, shape)
    masks = [ph.labels == k for k in LABEL_NAMES]
    total = np.sum(masks, axis=0)
    assert (total == 1).all()
    for k in LABEL_NAMES:
        assert masks[k].any(), LABEL_NAMES[k]
    assert ph.volume.data.min() >= -1 and ph.volume.data.max() <= 1


def test_tissue_means_ordered():
    ph = generate_phantom(3, (48, 48, 48))
    d = ph.volume.data
    assert d[ph.labels == WHITE_MATTER].mean() > d[ph.labels == GRAY_MATTER].mean()


def test_zero_noise_residual_small():
    # texture_amp=0 isolates the injected noise; the tissue texture itself leaks through the high-pass
    ref = generate_phantom(5, (48, 48, 48), 0.05, 0.0)
    clean = generate_phantom(5, (48, 48, 48), 0.0, 0.0)
    m = _wm_core(ref)
    ref_std = extract_noise(ref.volume).noise[m].std()
    assert extract_noise(clean.volume).noise[m].std() < 0.25 * ref_std


@pytest.mark.parametrize("sigma", [0.02, 0.05, 0.1])
def test_noise_recovery_within_25_percent(sigma):
    stds = []
    for seed in range(5):
        ph = generate_phantom(seed, (48, 48, 48), sigma, 0.0)
        stds.append(extract_noise(ph.volume).noise[_wm_core(ph)].std())
    assert all(abs(s - sigma) <= 0.25 * sigma for s in stds)
    assert abs(np.mean(stds) - sigma) <= 0.25 * sigma


def test_blur_reduces_sharpness():
    ph = generate_phantom(11, (32, 32, 32))
    vals = [laplacian_variance_sharpness(ph.volume.data, patch=16, n=200, seed=0)]
    for w in (0.5, 1.0, 2.0):
        vals.append(laplacian_variance_sharpness(ndimage.gaussian_filter(ph.volume.data, w), patch=16, n=200, seed=0))
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_cerebellum_region_inferior_posterior():
    ph = generate_phantom(2, (48, 48, 48))
    c = ph.region("cerebellum").data
    assert c.any()
    assert np.isin(ph.labels[c], (WHITE_MATTER, GRAY_MATTER)).all()
    idx = np.nonzero(c)
    assert idx[0].mean() < 24 and idx[1].mean() < 24
    assert ph.region("whole-brain").data[ph.labels == VENTRICLE].all()
    with pytest.raises(KeyError):
        ph.region("hippocampus")


def test_bad_arguments():
    with pytest.raises(ValueError):
        generate_phantom(0, (15, 32, 32))
    with pytest.raises(ValueError):
        generate_phantom(0, (16, 16, 16), noise_sigma=-0.1)


def test_split_counts():
    assert split_counts(10) == (8, 2)
    assert split_counts(5) == (4, 1)
    assert split_counts(100) == (80, 20)


def _hashes(root):
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_make_dataset(tmp_path):
    split = make_dataset(tmp_path / "a", 10, (16, 16, 16))
    assert len(split.train_ids) == 8 and len(split.test_ids) == 2
    assert len(list_volumes(tmp_path / "a" / "train")) == 8
    assert len(list_volumes(tmp_path / "a" / "test")) == 2
    man = json.loads((tmp_path / "a" / "split.json").read_text())
    assert set(man["train_ids"]).isdisjoint(man["test_ids"])
    vid = list_volumes(tmp_path / "a" / "test")[0]
    v = load_volume(tmp_path / "a" / "test" / vid)
    assert load_labels(tmp_path / "a" / "test" / vid).shape == v.shape
    make_dataset(tmp_path / "b", 10, (16, 16, 16))
    assert _hashes(tmp_path / "a") == _hashes(tmp_path / "b")
    with pytest.raises(ValueError):
        make_dataset(tmp_path / "c", 1, (16, 16, 16))
