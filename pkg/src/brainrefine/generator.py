"""Stage one: autoencoder plus a velocity-predicting DDPM over its latent space."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import Checkpoint, load_checkpoint, restore_optimizer, save_checkpoint
from .diffusion import (DiffusionSchedule, ddpm_step, forward_diffuse, recover_x0, schedule_from_config,
                        velocity_target)
from .nets import Autoencoder, AutoencoderSpec, UNet3d, UNetSpec
from .volume import Volume

log = logging.getLogger(__name__)


@dataclass
class LatentCode:
    data: np.ndarray  # (4, d, h, w)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4 or self.data.shape[0] != 4:
            raise ValueError(f"latent code must have shape (4, d, h, w), got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ValueError("latent code contains non-finite values")


@dataclass
class TrainResult:
    model: torch.nn.Module
    optimizer: torch.optim.Optimizer
    history: List[float] = field(default_factory=list)
    epoch: int = 0


def _as_batch(volumes) -> torch.Tensor:
    arrs = [v.data if isinstance(v, Volume) else np.asarray(v) for v in volumes]
    return torch.from_numpy(np.stack(arrs).astype(np.float32))[:, None]


def _check_divisible(shape):
    if any(n % Autoencoder.factor for n in shape):
        raise ValueError(f"volume shape {tuple(shape)} must be divisible by {Autoencoder.factor} on every axis")


# ---------------------------------------------------------------------------
# autoencoder
# ---------------------------------------------------------------------------

def train_autoencoder(volumes: Sequence, spec: AutoencoderSpec, epochs: int, lr: float = 1e-3, batch: int = 4,
                      weight_decay: float = 1e-5, seed: int = 0, resume: Optional[Checkpoint] = None,
                      on_epoch: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """Reconstruction MSE plus a small KL term on the latent posterior."""
    if not len(volumes):
        raise ValueError("empty training set")
    data = _as_batch(volumes)
    _check_divisible(data.shape[2:])
    torch.manual_seed(seed)
    model = Autoencoder(spec)
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    start = 0
    if resume is not None:
        model.load_state_dict(resume.state_dict())
        restore_optimizer(opt, resume)
        start = int(resume.extra.get("epoch", 0))
    rng = np.random.default_rng([seed, start])
    gen = torch.Generator().manual_seed(seed * 7919 + start)
    result = TrainResult(model, opt, [], start)
    model.train()
    for epoch in range(start, start + epochs):
        order = rng.permutation(len(data))
        total, count = 0.0, 0
        for i in range(0, len(order), batch):
            x = data[order[i:i + batch]]
            recon, mean, logvar = model(x, generator=gen)
            rec = F.mse_loss(recon, x)
            kl = 0.5 * torch.mean(mean**2 + logvar.exp() - 1.0 - logvar)
            loss = rec + spec.kl_weight * kl
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += rec.item() * len(x)
            count += len(x)
        result.history.append(total / count)
        result.epoch = epoch + 1
        if on_epoch:
            on_epoch(epoch + 1, result.history[-1])
        log.info("ae epoch %d recon mse %.5f", epoch + 1, result.history[-1])
    model.eval()
    return result


@torch.no_grad()
def encode(model: Autoencoder, x) -> LatentCode:
    data = x.data if isinstance(x, Volume) else np.asarray(x)
    _check_divisible(data.shape)
    z = model.encode(_as_batch([data]))[0]
    return LatentCode(z.numpy())


@torch.no_grad()
def decode(model: Autoencoder, z, spacing=(1.0, 1.0, 1.0)) -> Volume:
    data = z.data if isinstance(z, LatentCode) else np.asarray(z)
    out = model.decode(torch.from_numpy(np.asarray(data, dtype=np.float32))[None])[0, 0]
    return Volume(out.numpy(), spacing, (-1.0, 1.0))


@torch.no_grad()
def reconstruct(model: Autoencoder, volumes: Sequence, batch: int = 4) -> List[Volume]:
    out = []
    for i in range(0, len(volumes), batch):
        chunk = volumes[i:i + batch]
        x = _as_batch(chunk)
        _check_divisible(x.shape[2:])
        y = model.decode(model.encode(x))[:, 0].numpy()
        for v, arr in zip(chunk, y):
            out.append(Volume(arr, v.spacing if isinstance(v, Volume) else (1.0, 1.0, 1.0), (-1.0, 1.0)))
    return out


@torch.no_grad()
def reconstruction_mse(model: Autoencoder, volumes: Sequence) -> float:
    x = _as_batch(volumes)
    return float(F.mse_loss(model.decode(model.encode(x)), x))


def save_autoencoder(path, result: TrainResult, overwrite=False) -> Checkpoint:
    return save_checkpoint(path, "autoencoder", {"spec": result.model.spec.to_dict()}, result.model,
                           {"epoch": result.epoch, "history": result.history}, result.optimizer, overwrite)


def load_autoencoder(path_or_ckpt) -> Autoencoder:
    ckpt = path_or_ckpt if isinstance(path_or_ckpt, Checkpoint) else load_checkpoint(path_or_ckpt, "autoencoder")
    model = Autoencoder(AutoencoderSpec(**ckpt.config["spec"]))
    model.load_state_dict(ckpt.state_dict())
    return model.eval()


# ---------------------------------------------------------------------------
# latent DDPM
# ---------------------------------------------------------------------------

def latent_scale(latents: np.ndarray) -> float:
    """Factor bringing the training latents to unit standard deviation."""
    return float(1.0 / (np.std(latents) + 1e-8))


def _latent_array(latents) -> np.ndarray:
    arrs = [z.data if isinstance(z, LatentCode) else np.asarray(z, dtype=np.float32) for z in latents]
    if not arrs:
        raise ValueError("empty latent dataset")
    shapes = {a.shape for a in arrs}
    if len(shapes) != 1:
        raise ValueError(f"inconsistent latent shapes: {sorted(shapes)}")
    return np.stack(arrs).astype(np.float32)


def train_latent_ddpm(latents: Sequence, spec: UNetSpec, sched: DiffusionSchedule, epochs: int,
                      lr: float = 2.5e-5, batch: int = 4, seed: int = 0, scale: Optional[float] = None,
                      weight_decay: float = 0.0, resume: Optional[Checkpoint] = None,
                      on_epoch: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """MSE between predicted and true velocity at uniformly drawn timesteps."""
    data = _latent_array(latents)
    scale = latent_scale(data) if scale is None else scale
    z = torch.from_numpy(data * scale)
    torch.manual_seed(seed)
    model = UNet3d(spec)
    model.latent_scale = scale
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    start = 0
    if resume is not None:
        model.load_state_dict(resume.state_dict())
        restore_optimizer(opt, resume)
        start = int(resume.extra.get("epoch", 0))
    gen = torch.Generator().manual_seed(seed * 104729 + start)
    rng = np.random.default_rng([seed, start])
    result = TrainResult(model, opt, [], start)
    model.train()
    for epoch in range(start, start + epochs):
        order = rng.permutation(len(z))
        total = 0.0
        for i in range(0, len(order), batch):
            x0 = z[order[i:i + batch]]
            t = torch.randint(1, sched.T + 1, (len(x0),), generator=gen)
            eps = torch.randn(x0.shape, generator=gen)
            xt = forward_diffuse(x0, t, eps, sched)
            loss = F.mse_loss(model(xt, t), velocity_target(x0, eps, t, sched))
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(x0)
        result.history.append(total / len(z))
        result.epoch = epoch + 1
        if on_epoch:
            on_epoch(epoch + 1, result.history[-1])
        log.info("ldm epoch %d v-mse %.5f", epoch + 1, result.history[-1])
    model.eval()
    return result


@torch.no_grad()
def ldm_validation_loss(model: UNet3d, latents: Sequence, sched: DiffusionSchedule, seed: int = 0) -> float:
    """Velocity MSE on fixed (t, eps) draws; deterministic given the seed."""
    z = torch.from_numpy(_latent_array(latents) * model.latent_scale)
    gen = torch.Generator().manual_seed(seed)
    t = torch.randint(1, sched.T + 1, (len(z),), generator=gen)
    eps = torch.randn(z.shape, generator=gen)
    xt = forward_diffuse(z, t, eps, sched)
    return float(F.mse_loss(model(xt, t), velocity_target(z, eps, t, sched)))


def save_ldm(path, result: TrainResult, sched: DiffusionSchedule, overwrite=False) -> Checkpoint:
    cfg = {"spec": result.model.spec.to_dict(), "schedule": sched.config(), "latent_scale": result.model.latent_scale}
    return save_checkpoint(path, "latent_ddpm", cfg, result.model,
                           {"epoch": result.epoch, "history": result.history}, result.optimizer, overwrite)


def load_ldm(path_or_ckpt):
    """Returns ``(model, schedule)``."""
    ckpt = path_or_ckpt if isinstance(path_or_ckpt, Checkpoint) else load_checkpoint(path_or_ckpt, "latent_ddpm")
    model = UNet3d(UNetSpec(**ckpt.config["spec"]))
    model.load_state_dict(ckpt.state_dict())
    model.latent_scale = float(ckpt.config["latent_scale"])
    return model.eval(), schedule_from_config(ckpt.config["schedule"])


@torch.no_grad()
def sample_latent(model: UNet3d, sched: DiffusionSchedule, shape: Sequence[int], seeds: Sequence[int]) -> List[LatentCode]:
    """Ancestral sampling through all T steps, one independent noise stream per seed."""
    if not hasattr(model, "latent_scale"):
        raise ValueError("model carries no latent scale; load it from a trained checkpoint")
    seeds = list(seeds)
    if not seeds:
        return []
    shape = tuple(shape)
    gens = [torch.Generator().manual_seed(int(s)) for s in seeds]

    def noise():
        return torch.stack([torch.randn(shape, generator=g) for g in gens])

    x = noise()
    for t in range(sched.T, 0, -1):
        tt = torch.full((len(seeds),), t, dtype=torch.long)
        x0 = recover_x0(x, model(x, tt), tt, sched)
        x = ddpm_step(x, x0, t, sched, noise() if t > 1 else None)
    x = x / model.latent_scale
    return [LatentCode(z.numpy()) for z in x]


@torch.no_grad()
def generate(ae: Autoencoder, ddpm: UNet3d, sched: DiffusionSchedule, volume_shape: Sequence[int],
             seeds: Sequence[int], spacing=(1.0, 1.0, 1.0), batch: int = 8) -> List[Volume]:
    """Decode fresh latent samples into coarse volumes."""
    _check_divisible(volume_shape)
    lat_shape = (4,) + tuple(n // Autoencoder.factor for n in volume_shape)
    seeds = list(seeds)
    out = []
    for i in range(0, len(seeds), batch):
        for z in sample_latent(ddpm, sched, lat_shape, seeds[i:i + batch]):
            out.append(decode(ae, z, spacing))
    return out
