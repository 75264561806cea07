import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from brainrefine import refiner
from brainrefine.diffusion import make_schedule, x0_from_eps
from brainrefine.nets import UNet3d, UNetSpec
from brainrefine.refiner import (MASK_KINDS, PARTIAL_KINDS, Mask, make_mask, make_y_prev, masked_diffusion_loss,
                                 plan_traversal, refine_patch, refine_volume, refine_volumes, sample_mask_kind,
                                 sample_training_mask)
from brainrefine.volume import PatchGrid, build_patch_grid

P = 8
SCHED = make_schedule(6, 0.0015, 0.5, "scaled_linear")


@pytest.fixture(scope="module")
def tiny_model():
    torch.manual_seed(0)
    m = UNet3d(UNetSpec(3, 1, (8, 16), 1, (False, True))).eval()
    m.patch_size = P
    return m


def test_half_masks_are_exact_half_spaces():
    p = 6
    half = np.arange(p) >= p // 2
    expect = {
        "inferior": (0, ~half), "superior": (0, half),
        "posterior": (1, ~half), "anterior": (1, half),
        "left": (2, ~half), "right": (2, half),
    }
    for kind, (axis, line) in expect.items():
        m = make_mask(kind, p).data
        assert m.sum() == p**3 // 2
        shape = [1, 1, 1]
        shape[axis] = p
        np.testing.assert_array_equal(m, np.broadcast_to(line.reshape(shape), (p, p, p)))
    assert make_mask("full", p).data.all()
    with pytest.raises(ValueError):
        make_mask("arbitrary", p)
    with pytest.raises(ValueError):
        Mask(np.ones((2, 2, 2)), "diagonal")


def test_mask_sampler_extremes():
    rng = np.random.default_rng(0)
    assert all(sample_mask_kind(rng, 1.0) == "full" for _ in range(200))
    kinds = {sample_mask_kind(rng, 0.0) for _ in range(500)}
    assert kinds == set(PARTIAL_KINDS)
    assert sample_training_mask(rng, 4, 1.0).data.all()
    with pytest.raises(ValueError):
        sample_mask_kind(rng, 1.5)


def test_y_prev_identities():
    rng = np.random.default_rng(1)
    x, g = rng.normal(size=(2, P, P, P))
    np.testing.assert_array_equal(make_y_prev(x, make_mask("full", P), g), g)
    np.testing.assert_array_equal(make_y_prev(x, np.zeros((P, P, P), bool), g), x)
    m = make_mask("left", P).data
    y = make_y_prev(x, m, g)
    for i, j, k in itertools.product(range(P), repeat=3):
        assert y[i, j, k] == (g[i, j, k] if k < P // 2 else x[i, j, k])
    yt = make_y_prev(torch.from_numpy(x), torch.from_numpy(m), torch.from_numpy(g))
    np.testing.assert_array_equal(yt.numpy(), y)
    with pytest.raises(ValueError):
        make_y_prev(x, m, g[:-1])


def test_masked_loss_values():
    rng = np.random.default_rng(2)
    xi = rng.normal(size=(P, P, P))
    m = make_mask("anterior", P)
    assert masked_diffusion_loss(xi, xi, m) == 0.0
    assert masked_diffusion_loss(xi + 1.0, xi, m) == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ValueError):
        masked_diffusion_loss(xi, xi, np.zeros((P, P, P), bool))
    with pytest.raises(ValueError):
        masked_diffusion_loss(xi, xi[:-1], m)


def test_masked_loss_batch_weighs_samples_equally():
    xi = np.zeros((2, 1, P, P, P))
    pred = xi.copy()
    pred[0] += 1.0  # error 1 under a full mask
    pred[1] += 3.0  # error 9 under a half mask
    masks = np.stack([make_mask("full", P).data, make_mask("left", P).data])[:, None]
    assert masked_diffusion_loss(pred, xi, masks) == pytest.approx(5.0)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(MASK_KINDS[:-1]), st.integers(0, 2**31), st.floats(-1e6, 1e6))
def test_masked_loss_ignores_unmasked_predictions(kind, seed, shift):
    rng = np.random.default_rng(seed)
    pred, xi = rng.normal(size=(2, P, P, P))
    m = make_mask(kind, P).data
    bumped = np.where(m, pred, pred + shift + rng.normal(size=pred.shape))
    assert masked_diffusion_loss(bumped, xi, m) == masked_diffusion_loss(pred, xi, m)


def test_masked_loss_gradient_and_nan_outside_mask():
    m = torch.from_numpy(make_mask("superior", P).data)
    pred = torch.randn(P, P, P, requires_grad=True)
    xi = torch.randn(P, P, P)
    masked_diffusion_loss(pred, xi, m).backward()
    assert (pred.grad[~m] == 0).all() and (pred.grad[m] != 0).any()
    poisoned = torch.where(m, pred.detach(), torch.full_like(xi, float("nan")))
    assert torch.isfinite(masked_diffusion_loss(poisoned[None, None], xi[None, None], m[None, None]))


def _count_writes(plan):
    counts = np.zeros(plan.grid.volume_shape, dtype=int)
    p = plan.grid.patch_size
    for e in plan.entries:
        o = e.origin
        counts[o[0]:o[0] + p, o[1]:o[1] + p, o[2]:o[2] + p] += e.mask
    return counts


def test_plan_single_patch():
    plan = plan_traversal(build_patch_grid((8, 8, 8), 8, 4))
    assert len(plan.entries) == 1 and plan.entries[0].mask.all()


def test_plan_three_cubed():
    plan = plan_traversal(build_patch_grid((16, 16, 16), 8, 4))
    assert len(plan.entries) == 27
    assert plan.entries[0].index == (1, 1, 1) and plan.entries[0].mask.all()
    seen = [plan.entries[0].index]
    for e in plan.entries[1:]:
        assert any(max(abs(a - b) for a, b in zip(e.index, s)) == 1 for s in seen)
        seen.append(e.index)
    assert _count_writes(plan).sum() == 16**3
    assert (_count_writes(plan) == 1).all()
    shells = [e.shell for e in plan.entries]
    assert shells == sorted(shells)


def test_plan_ties_lexicographic():
    plan = plan_traversal(build_patch_grid((16, 16, 16), 8, 4))
    for group in plan.shells():
        origins = [e.origin for e in group]
        assert origins == sorted(origins)


def test_plan_skips_fully_covered_patches():
    # stride 2 on a 12-voxel axis with p=8: origins 0, 2, 4 -> the middle one adds nothing after both ends
    grid = build_patch_grid((12, 8, 8), 8, 2)
    plan = plan_traversal(grid)
    assert (_count_writes(plan) == 1).all()
    assert len(plan.entries) + len(plan.skipped) == len(grid.origins)


def test_plan_empty_grid():
    with pytest.raises(ValueError):
        plan_traversal(PatchGrid((8, 8, 8), 8, 4, ((), (), ()), []))


def test_plan_digest_stable():
    g = build_patch_grid((16, 16, 16), 8, 4)
    assert plan_traversal(g).digest() == plan_traversal(g).digest()
    assert plan_traversal(g).digest() != plan_traversal(build_patch_grid((16, 16, 16), 8, 6)).digest()


def test_refine_patch_deterministic(tiny_model):
    rng = np.random.default_rng(3)
    xh = rng.uniform(-1, 1, (P, P, P)).astype(np.float32)
    y = rng.normal(size=(P, P, P)).astype(np.float32)
    a = refine_patch(tiny_model, xh, y, SCHED, 5)
    np.testing.assert_array_equal(a, refine_patch(tiny_model, xh, y, SCHED, 5))
    assert not np.array_equal(a, refine_patch(tiny_model, xh, y, SCHED, 6))
    with pytest.raises(ValueError):
        refine_patch(tiny_model, np.zeros((6, 6, 6)), np.zeros((6, 6, 6)), SCHED, 0)


def test_single_patch_volume_is_one_full_mask_chain(tiny_model):
    xh = np.random.default_rng(4).uniform(-1, 1, (P, P, P)).astype(np.float32)
    out = refine_volume(tiny_model, xh, build_patch_grid((P, P, P), P, P // 2), SCHED, 9)
    gen = torch.Generator().manual_seed(9)
    y_prev = torch.randn((P, P, P), generator=gen)  # full mask: guidance is pure noise
    ref = refiner._reverse_chain(tiny_model, torch.from_numpy(xh)[None, None], y_prev[None, None], SCHED, [gen])
    np.testing.assert_array_equal(out.data, ref[0, 0].numpy())


@pytest.mark.parametrize("mode", ["sequential", "shell"])
def test_refine_volume_writes_each_voxel_once(tiny_model, mode):
    shape = (16, 12, 12)
    grid = build_patch_grid(shape, P, 4)
    xh = np.random.default_rng(5).uniform(-1, 1, shape).astype(np.float32)
    counts = np.zeros(shape, dtype=int)
    a = refine_volume(tiny_model, xh, grid, SCHED, 1, mode, write_counts=counts)
    assert (counts == 1).all()
    assert np.isfinite(a.data).all()
    np.testing.assert_array_equal(a.data, refine_volume(tiny_model, xh, grid, SCHED, 1, mode).data)


def test_refine_volumes_batch_matches_single(tiny_model):
    shape = (12, 12, 12)
    grid = build_patch_grid(shape, P, 4)
    rng = np.random.default_rng(6)
    xs = [rng.uniform(-1, 1, shape).astype(np.float32) for _ in range(2)]
    both = refine_volumes(tiny_model, xs, grid, SCHED, [11, 12])
    single = refine_volume(tiny_model, xs[1], grid, SCHED, 12)
    np.testing.assert_allclose(both[1].data, single.data, atol=1e-5)


def test_refine_volume_shape_mismatch(tiny_model):
    with pytest.raises(ValueError):
        refine_volume(tiny_model, np.zeros((12, 12, 12), np.float32), build_patch_grid((16, 16, 16), P), SCHED, 0)


def _pairs(n=4, shape=(12, 12, 12)):
    rng = np.random.default_rng(7)
    out = []
    for _ in range(n):
        x = np.clip(rng.normal(0, 0.3, shape), -1, 1).astype(np.float32)
        out.append((x, (x * 0.5).astype(np.float32)))
    return out


def test_training_overfits_fixed_batch():
    torch.manual_seed(0)
    model = UNet3d(UNetSpec(3, 1, (8, 16), 1, (False, False)))
    xs, xhs = refiner._pair_arrays(_pairs())
    batch = refiner.draw_refiner_batch(xs, xhs, np.arange(4), P, SCHED, np.random.default_rng(0))
    opt = torch.optim.Adam(model.parameters(), lr=3e-3)
    first = None
    for _ in range(400):
        loss = refiner.refiner_loss(model, batch, SCHED)
        first = first if first is not None else loss.item()
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert refiner.refiner_loss(model, batch, SCHED).item() < 1e-2 < first


def test_train_checkpoint_roundtrip_and_resume(tmp_path):
    spec = UNetSpec(3, 1, (8, 16), 1, (False, False))
    log = []
    res = refiner.train_refiner(_pairs(), P, spec, SCHED, 2, lr=1e-3, batch=4, seed=0,
                                on_epoch=lambda e, v: log.append(e))
    assert log == [1, 2] and len(res.history) == 2
    ck = refiner.save_refiner(tmp_path / "r.npz", res, SCHED)
    model, sched = refiner.load_refiner(tmp_path / "r.npz")
    assert model.patch_size == P and sched.config() == SCHED.config()
    v1 = refiner.refiner_validation_loss(res.model, _pairs(), SCHED, seed=3)
    v2 = refiner.refiner_validation_loss(model, _pairs(), SCHED, seed=3)
    assert v1 == v2
    res2 = refiner.train_refiner(_pairs(), P, spec, SCHED, 1, lr=1e-3, batch=4, seed=0, resume=ck,
                                 on_epoch=lambda e, v: log.append(e))
    assert log == [1, 2, 3] and res2.epoch == 3
    with pytest.raises(ValueError):
        refiner.train_refiner([(np.zeros((12, 12, 12)), np.zeros((12, 12, 8)))], P, spec, SCHED, 1)


def test_refiner_net_implied_clean_estimate():
    torch.manual_seed(0)
    net = refiner.RefinerNet(UNetSpec(3, 1, (8, 16), 1, (False, False)), SCHED).eval()
    x = torch.randn(SCHED.T, 3, P, P, P)
    t = torch.arange(1, SCHED.T + 1)
    ab = torch.tensor(SCHED.alpha_bars, dtype=torch.float32).view(-1, 1, 1, 1, 1)
    with torch.no_grad():
        # zero-initialized head: the clean estimate interpolates x_t and the coarse patch
        x0 = x0_from_eps(x[:, :1], net(x, t), t, SCHED)
        assert torch.allclose(x0, ab.sqrt() * x[:, :1] + (1 - ab) * x[:, 1:2], atol=1e-4)
        torch.nn.init.normal_(net.net.conv_out.weight, std=0.1)
        f = net.net(x, t)
        x0 = x0_from_eps(x[:, :1], net(x, t), t, SCHED)
        assert torch.allclose(x0, ab.sqrt() * x[:, :1] + (1 - ab) * x[:, 1:2] - (1 - ab).sqrt() * f, atol=1e-4)
