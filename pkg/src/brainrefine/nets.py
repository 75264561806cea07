"""3D network building blocks: a residual autoencoder and a time-conditioned U-Net."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F


def _groups(ch: int) -> int:
    for g in (8, 4, 2, 1):
        if ch % g == 0:
            return g
    return 1


def _act(name: str) -> nn.Module:
    if name == "leaky_relu":
        return nn.LeakyReLU(0.2)
    if name == "silu":
        return nn.SiLU()
    if name == "relu":
        return nn.ReLU()
    raise ValueError(f"unknown activation {name!r}")


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32, device=t.device) / half)
    args = t.float()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock3d(nn.Module):
    def __init__(self, cin: int, cout: int, act: str = "silu", temb_dim: int = 0):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv3d(cin, cout, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv3d(cout, cout, 3, padding=1)
        self.act = _act(act)
        self.temb = nn.Linear(temb_dim, cout) if temb_dim else None
        self.skip = nn.Conv3d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb=None):
        h = self.conv1(self.act(self.norm1(x)))
        if self.temb is not None:
            h = h + self.temb(temb)[:, :, None, None, None]
        h = self.conv2(self.act(self.norm2(h)))
        return h + self.skip(x)


class Attention3d(nn.Module):
    """Single-head self-attention over all voxels of a (coarse) feature map."""

    def __init__(self, ch: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(ch), ch)
        self.qkv = nn.Conv3d(ch, 3 * ch, 1)
        self.proj = nn.Conv3d(ch, ch, 1)

    def forward(self, x):
        b, c = x.shape[:2]
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, -1).unbind(1)
        attn = torch.softmax(torch.einsum("bci,bcj->bij", q, k) / math.sqrt(c), dim=-1)
        out = torch.einsum("bij,bcj->bci", attn, v).reshape(x.shape)
        return x + self.proj(out)


# ---------------------------------------------------------------------------
# autoencoder
# ---------------------------------------------------------------------------

@dataclass
class AutoencoderSpec:
    channels: Tuple[int, ...] = (32, 64, 96)
    latent_channels: int = 4
    num_res_blocks: int = 1
    activation: str = "leaky_relu"
    kl_weight: float = 1e-6

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) != 3:
            raise ValueError("autoencoder needs exactly 3 channel widths (two 2x downsampling stages)")
        if self.latent_channels != 4:
            raise ValueError("latent_channels must be 4")

    def to_dict(self):
        return asdict(self)


class Autoencoder(nn.Module):
    """Residual conv encoder/decoder with two stride-2 stages (4x per axis).

    The encoder emits a mean and log-variance per latent voxel; ``encode``
    returns the mean. The decoder squashes through a sigmoid rescaled to
    [-1, 1].
    """

    factor = 4

    def __init__(self, spec: AutoencoderSpec):
        super().__init__()
        self.spec = spec
        c0, c1, c2 = spec.channels
        act = spec.activation
        nrb = spec.num_res_blocks

        def blocks(cin, cout):
            return [ResBlock3d(cin if i == 0 else cout, cout, act) for i in range(nrb)]

        enc = [nn.Conv3d(1, c0, 3, padding=1)]
        enc += blocks(c0, c0) + [nn.Conv3d(c0, c0, 3, stride=2, padding=1)]
        enc += blocks(c0, c1) + [nn.Conv3d(c1, c1, 3, stride=2, padding=1)]
        enc += blocks(c1, c2) + [nn.GroupNorm(_groups(c2), c2), _act(act), nn.Conv3d(c2, 2 * spec.latent_channels, 1)]
        self.encoder = nn.Sequential(*enc)

        dec = [nn.Conv3d(spec.latent_channels, c2, 1)]
        dec += blocks(c2, c2) + [nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv3d(c2, c1, 3, padding=1)]
        dec += blocks(c1, c1) + [nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv3d(c1, c0, 3, padding=1)]
        dec += blocks(c0, c0) + [nn.GroupNorm(_groups(c0), c0), _act(act), nn.Conv3d(c0, 1, 3, padding=1)]
        self.decoder = nn.Sequential(*dec)

    def encode_dist(self, x):
        mean, logvar = self.encoder(x).chunk(2, dim=1)
        return mean, logvar.clamp(-30.0, 20.0)

    def encode(self, x):
        return self.encode_dist(x)[0]

    def decode(self, z):
        return 2.0 * torch.sigmoid(self.decoder(z)) - 1.0

    def forward(self, x, generator=None):
        mean, logvar = self.encode_dist(x)
        z = mean + torch.exp(0.5 * logvar) * torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
        return self.decode(z), mean, logvar


# ---------------------------------------------------------------------------
# U-Net
# ---------------------------------------------------------------------------

@dataclass
class UNetSpec:
    in_channels: int = 4
    out_channels: int = 4
    channels: Tuple[int, ...] = (32, 64, 96)
    num_res_blocks: int = 2
    attention: Tuple[bool, ...] = (False, True, True)

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.attention = tuple(bool(a) for a in self.attention)
        if len(self.attention) != len(self.channels):
            raise ValueError("attention flags must match the number of levels")

    def to_dict(self):
        return asdict(self)


class UNet3d(nn.Module):
    def __init__(self, spec: UNetSpec):
        super().__init__()
        self.spec = spec
        ch = spec.channels
        temb_dim = 4 * ch[0]
        self.temb = nn.Sequential(nn.Linear(ch[0], temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))
        self.conv_in = nn.Conv3d(spec.in_channels, ch[0], 3, padding=1)

        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        skips = [ch[0]]
        cur = ch[0]
        for lvl, c in enumerate(ch):
            for _ in range(spec.num_res_blocks):
                self.down.append(nn.ModuleList([ResBlock3d(cur, c, "silu", temb_dim),
                                                Attention3d(c) if spec.attention[lvl] else nn.Identity()]))
                cur = c
                skips.append(cur)
            if lvl < len(ch) - 1:
                self.downsample.append(nn.Conv3d(cur, cur, 3, stride=2, padding=1))
                skips.append(cur)

        self.mid1 = ResBlock3d(cur, cur, "silu", temb_dim)
        self.mid_attn = Attention3d(cur) if spec.attention[-1] else nn.Identity()
        self.mid2 = ResBlock3d(cur, cur, "silu", temb_dim)

        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for lvl in reversed(range(len(ch))):
            c = ch[lvl]
            for _ in range(spec.num_res_blocks + 1):
                self.up.append(nn.ModuleList([ResBlock3d(cur + skips.pop(), c, "silu", temb_dim),
                                              Attention3d(c) if spec.attention[lvl] else nn.Identity()]))
                cur = c
            if lvl > 0:
                self.upsample.append(nn.Conv3d(cur, cur, 3, padding=1))
        self.norm_out = nn.GroupNorm(_groups(cur), cur)
        self.conv_out = nn.Conv3d(cur, spec.out_channels, 3, padding=1)

    def forward(self, x, t):
        nrb = self.spec.num_res_blocks
        temb = self.temb(timestep_embedding(t, self.spec.channels[0]))
        h = self.conv_in(x)
        hs = [h]
        blocks = iter(self.down)
        for lvl in range(len(self.spec.channels)):
            for _ in range(nrb):
                res, attn = next(blocks)
                h = attn(res(h, temb))
                hs.append(h)
            if lvl < len(self.spec.channels) - 1:
                h = self.downsample[lvl](h)
                hs.append(h)
        h = self.mid2(self.mid_attn(self.mid1(h, temb)), temb)
        blocks = iter(self.up)
        ups = iter(self.upsample)
        for lvl in reversed(range(len(self.spec.channels))):
            for _ in range(nrb + 1):
                res, attn = next(blocks)
                h = attn(res(torch.cat([h, hs.pop()], dim=1), temb))
            if lvl > 0:
                h = next(ups)(F.interpolate(h, scale_factor=2, mode="nearest"))
        return self.conv_out(F.silu(self.norm_out(h)))
