import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from brainrefine.diffusion import (DiffusionSchedule, ddpm_step, forward_diffuse, make_schedule, recover_eps,
                                   recover_x0, velocity_target, x0_from_eps)


def _fixed(ab):
    ab = np.array([ab], dtype=np.float64)
    return DiffusionSchedule(1, 1 - ab, ab)


def test_single_step_schedule():
    np.testing.assert_allclose(make_schedule(1, 0.5, 0.5).alpha_bars, [0.5])


def test_thousand_step_schedule_reaches_noise():
    s = make_schedule(1000, 0.0015, 0.0205, "linear")
    prod = 1.0
    for i in range(1000):
        prod *= 1.0 - (0.0015 + (0.0205 - 0.0015) * i / 999)
    assert s.alpha_bars[-1] == pytest.approx(prod, rel=1e-9)
    assert prod < 0.01


@pytest.mark.parametrize("kind", ["linear", "scaled_linear"])
def test_schedule_monotone(kind):
    s = make_schedule(200, 0.0015, 0.2, kind)
    assert np.all(np.diff(s.betas) >= 0)
    assert np.all(np.diff(s.alpha_bars) < 0)
    assert np.all((s.betas > 0) & (s.betas < 1))
    assert s.betas[0] == pytest.approx(0.0015) and s.betas[-1] == pytest.approx(0.2)


def test_scaled_linear_is_linear_in_sqrt():
    s = make_schedule(5, 0.01, 0.09, "scaled_linear")
    np.testing.assert_allclose(np.sqrt(s.betas), [0.1, 0.15, 0.2, 0.25, 0.3])


@pytest.mark.parametrize("args", [(0, 0.1, 0.2), (10, 0.0, 0.1), (10, 0.2, 0.1), (10, 0.1, 1.0)])
def test_schedule_errors(args):
    with pytest.raises(ValueError):
        make_schedule(*args)
    with pytest.raises(ValueError):
        make_schedule(10, 0.1, 0.2, "cosine")


def test_degenerate_alpha_bars():
    rng = np.random.default_rng(0)
    x0, eps = rng.normal(size=(2, 3, 4, 5))
    np.testing.assert_array_equal(forward_diffuse(x0, 1, eps, _fixed(1.0)), x0)
    np.testing.assert_array_equal(velocity_target(x0, eps, 1, _fixed(1.0)), eps)
    np.testing.assert_array_equal(velocity_target(x0, eps, 1, _fixed(0.0)), -x0)
    s = make_schedule(50, 0.001, 0.2)
    np.testing.assert_allclose(forward_diffuse(x0, 17, np.zeros_like(x0), s), math.sqrt(s.alpha_bars[16]) * x0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 1000), st.integers(0, 2**31))
def test_v_roundtrip_every_t(t, seed):
    s = make_schedule(1000, 0.0015, 0.0205)
    g = torch.Generator().manual_seed(seed)
    x0 = torch.randn(2, 1, 6, 6, 6, generator=g)
    eps = torch.randn(2, 1, 6, 6, 6, generator=g)
    xt = forward_diffuse(x0, t, eps, s)
    v = velocity_target(x0, eps, t, s)
    assert (recover_x0(xt, v, t, s) - x0).abs().max() < 1e-5
    assert (recover_eps(xt, v, t, s) - eps).abs().max() < 1e-5


def test_per_sample_timesteps_broadcast():
    s = make_schedule(100, 0.001, 0.1)
    x0 = torch.randn(3, 1, 4, 4, 4)
    eps = torch.randn_like(x0)
    t = torch.tensor([1, 50, 100])
    xt = forward_diffuse(x0, t, eps, s)
    for i, ti in enumerate(t.tolist()):
        torch.testing.assert_close(xt[i], forward_diffuse(x0[i], ti, eps[i], s))
    torch.testing.assert_close(x0_from_eps(xt, eps, t, s), x0, atol=1e-4, rtol=0)


def test_forward_variance_preserved():
    s = make_schedule(1000, 0.0015, 0.0205)
    rng = np.random.default_rng(1)
    for t in (1, 250, 500, 1000):
        xt = forward_diffuse(rng.standard_normal(10_000), t, rng.standard_normal(10_000), s)
        assert abs(xt.var() - 1.0) < 0.05


def test_ddpm_step_matches_gaussian_conditioning():
    s = make_schedule(20, 0.01, 0.3)
    rng = np.random.default_rng(2)
    x0, xt = rng.normal(size=(2, 1000))
    for t in (2, 7, 20):
        beta, ab, ab_prev = s.betas[t - 1], s.alpha_bars[t - 1], s.alpha_bars[t - 2]
        # joint Gaussian of (x_{t-1}, x_t) given x0, conditioned on x_t
        cov = math.sqrt(1 - beta) * (1 - ab_prev)
        mean = math.sqrt(ab_prev) * x0 + cov / (1 - ab) * (xt - math.sqrt(ab) * x0)
        var = (1 - ab_prev) - cov**2 / (1 - ab)
        np.testing.assert_allclose(ddpm_step(xt, x0, t, s), mean, rtol=1e-12, atol=1e-12)
        z = rng.normal(size=1000)
        np.testing.assert_allclose(ddpm_step(xt, x0, t, s, z), mean + math.sqrt(var) * z, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(ddpm_step(xt, x0, 1, s, rng.normal(size=1000)), x0, atol=1e-12)


def test_shape_and_range_errors():
    s = make_schedule(10, 0.01, 0.2)
    with pytest.raises(ValueError):
        forward_diffuse(np.zeros(3), 1, np.zeros(4), s)
    with pytest.raises(ValueError):
        velocity_target(np.zeros(3), np.zeros(4), 1, s)
    with pytest.raises(ValueError):
        forward_diffuse(np.zeros(3), 11, np.zeros(3), s)
    with pytest.raises(ValueError):
        forward_diffuse(np.zeros(3), 0, np.zeros(3), s)
