"""Noise schedules and the closed-form algebra of the Gaussian forward process.

Timesteps are 1-based throughout: ``t`` runs from 1 (least noisy) to ``T``.
Every function accepts numpy arrays or torch tensors; ``t`` may be a Python
int or an integer array/tensor of per-sample steps (broadcast over the
leading axis).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int
    betas: np.ndarray
    alpha_bars: np.ndarray
    kind: str = "linear"
    beta_start: float = 0.0
    beta_end: float = 0.0

    def config(self) -> dict:
        return {"T": self.T, "kind": self.kind, "beta_start": self.beta_start, "beta_end": self.beta_end}


def make_schedule(T: int, beta_start: float, beta_end: float, kind: str = "linear") -> DiffusionSchedule:
    """Linear or scaled-linear (linear in sqrt(beta), then squared) betas."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif kind == "scaled_linear":
        betas = np.linspace(beta_start**0.5, beta_end**0.5, T, dtype=np.float64) ** 2
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alpha_bars = np.cumprod(1.0 - betas)
    betas.setflags(write=False)
    alpha_bars.setflags(write=False)
    return DiffusionSchedule(int(T), betas, alpha_bars, kind, float(beta_start), float(beta_end))


def schedule_from_config(cfg: dict) -> DiffusionSchedule:
    return make_schedule(int(cfg["T"]), float(cfg["beta_start"]), float(cfg["beta_end"]), cfg.get("kind", "linear"))


def _gather(table: np.ndarray, t, like):
    """Look up ``table[t-1]`` and shape it to broadcast against ``like``."""
    if isinstance(like, torch.Tensor):
        tab = torch.tensor(table.tolist(), dtype=like.dtype, device=like.device)
        if isinstance(t, torch.Tensor) and t.ndim > 0:
            return tab[t.long() - 1].reshape((-1,) + (1,) * (like.ndim - 1))
        return tab[int(t) - 1]
    if np.ndim(t) > 0:
        idx = np.asarray(t, dtype=np.int64) - 1
        return table[idx].reshape((-1,) + (1,) * (np.ndim(like) - 1))
    return table[int(t) - 1]


def _check_t(t, sched):
    tt = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    if tt.size and (tt.min() < 1 or tt.max() > sched.T):
        raise ValueError(f"timestep out of range 1..{sched.T}: {tt.min()}..{tt.max()}")


def _check_shapes(a, b, what):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def forward_diffuse(x0, t, eps, sched: DiffusionSchedule):
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    _check_shapes(x0, eps, "forward_diffuse")
    _check_t(t, sched)
    ab = _gather(sched.alpha_bars, t, x0)
    return ab**0.5 * x0 + (1 - ab) ** 0.5 * eps


def velocity_target(x0, eps, t, sched: DiffusionSchedule):
    """v = sqrt(abar_t) eps - sqrt(1 - abar_t) x0."""
    _check_shapes(x0, eps, "velocity_target")
    _check_t(t, sched)
    ab = _gather(sched.alpha_bars, t, x0)
    return ab**0.5 * eps - (1 - ab) ** 0.5 * x0


def recover_x0(x_t, v, t, sched: DiffusionSchedule):
    _check_shapes(x_t, v, "recover_x0")
    _check_t(t, sched)
    ab = _gather(sched.alpha_bars, t, x_t)
    return ab**0.5 * x_t - (1 - ab) ** 0.5 * v


def recover_eps(x_t, v, t, sched: DiffusionSchedule):
    ab = _gather(sched.alpha_bars, t, x_t)
    return (1 - ab) ** 0.5 * x_t + ab**0.5 * v


def x0_from_eps(x_t, eps, t, sched: DiffusionSchedule):
    ab = _gather(sched.alpha_bars, t, x_t)
    return (x_t - (1 - ab) ** 0.5 * eps) / ab**0.5


def ddpm_step(x_t, x0_pred, t: int, sched: DiffusionSchedule, noise=None):
    """One ancestral step x_t -> x_{t-1} through the Gaussian posterior q(x_{t-1} | x_t, x0).

    At ``t == 1`` the posterior mean is returned without added noise.
    """
    t = int(t)
    beta = float(sched.betas[t - 1])
    ab = float(sched.alpha_bars[t - 1])
    ab_prev = float(sched.alpha_bars[t - 2]) if t > 1 else 1.0
    c0 = ab_prev**0.5 * beta / (1.0 - ab)
    ct = (1.0 - beta) ** 0.5 * (1.0 - ab_prev) / (1.0 - ab)
    mean = c0 * x0_pred + ct * x_t
    if t == 1 or noise is None:
        return mean
    var = beta * (1.0 - ab_prev) / (1.0 - ab)
    return mean + var**0.5 * noise
