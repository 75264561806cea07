"""Stage two: patch-based conditional diffusion refinement.

The refiner models p(y_patch | x_hat_patch, y_prev) with an epsilon-predicting
3D U-Net whose input is the channel concatenation of the noisy patch, the
coarse patch and the guidance patch. The U-Net output is mixed with the noisy
and coarse patches before it becomes the noise estimate (see ``RefinerNet``),
which keeps the implied clean-patch estimate well conditioned at every step. Training masks are full (10%) or one of
six half-spaces; the loss is evaluated only inside the mask. At inference
patches are visited center-outward and each patch's guidance is assembled
from voxels that have already been refined.

Patch axes follow the volume axes: axis 0 runs inferior to superior, axis 1
posterior to anterior and axis 2 left to right.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .checkpoint import Checkpoint, load_checkpoint, restore_optimizer, save_checkpoint
from .diffusion import DiffusionSchedule, ddpm_step, forward_diffuse, schedule_from_config, x0_from_eps
from .generator import TrainResult
from .nets import UNet3d, UNetSpec
from .volume import PatchGrid, Volume, insert_patch, patch_slices

log = logging.getLogger(__name__)

PARTIAL_KINDS = ("anterior", "posterior", "inferior", "superior", "left", "right")
MASK_KINDS = ("full",) + PARTIAL_KINDS + ("arbitrary",)
# kind -> (axis, high half?)
_HALF = {
    "inferior": (0, False), "superior": (0, True),
    "posterior": (1, False), "anterior": (1, True),
    "left": (2, False), "right": (2, True),
}


@dataclass
class Mask:
    data: np.ndarray
    kind: str = "arbitrary"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=bool)
        if self.kind not in MASK_KINDS:
            raise ValueError(f"unknown mask kind {self.kind!r}")


def make_mask(kind: str, p: int) -> Mask:
    """Full mask or an exact half-space of a p^3 patch."""
    data = np.zeros((p, p, p), dtype=bool)
    if kind == "full":
        data[:] = True
    elif kind in _HALF:
        axis, high = _HALF[kind]
        idx = [slice(None)] * 3
        idx[axis] = slice(p - p // 2, None) if high else slice(0, p // 2)
        data[tuple(idx)] = True
    else:
        raise ValueError(f"make_mask builds full or half masks, not {kind!r}")
    return Mask(data, kind)


def sample_mask_kind(rng: np.random.Generator, full_prob: float = 0.1) -> str:
    if not 0.0 <= full_prob <= 1.0:
        raise ValueError(f"full_prob must lie in [0, 1], got {full_prob}")
    if rng.random() < full_prob:
        return "full"
    return PARTIAL_KINDS[int(rng.integers(len(PARTIAL_KINDS)))]


def sample_training_mask(rng: np.random.Generator, p: int, full_prob: float = 0.1) -> Mask:
    return make_mask(sample_mask_kind(rng, full_prob), p)


def _mask_array(mask):
    return mask.data if isinstance(mask, Mask) else mask


def make_y_prev(x_patch, mask, noise):
    """Guidance patch: known content outside the mask, noise inside it."""
    m = _mask_array(mask)
    if not (x_patch.shape == noise.shape == m.shape):
        raise ValueError(f"shape mismatch: x {tuple(x_patch.shape)}, noise {tuple(noise.shape)}, mask {tuple(m.shape)}")
    if isinstance(x_patch, torch.Tensor):
        m = torch.as_tensor(m, dtype=x_patch.dtype)
    else:
        m = np.asarray(m, dtype=np.result_type(x_patch, noise))
    return x_patch * (1 - m) + noise * m


def masked_diffusion_loss(pred_noise, true_noise, mask):
    """Squared error averaged over masked voxels.

    With a leading batch axis the per-sample masked means are averaged, so
    half and full masks weigh the same.
    """
    m = _mask_array(mask)
    if tuple(pred_noise.shape) != tuple(true_noise.shape) or tuple(np.shape(m)) != tuple(pred_noise.shape):
        raise ValueError(f"shape mismatch: pred {tuple(pred_noise.shape)}, true {tuple(true_noise.shape)}, "
                         f"mask {tuple(np.shape(m))}")
    torch_mode = isinstance(pred_noise, torch.Tensor)
    if torch_mode:
        m = torch.as_tensor(m, dtype=pred_noise.dtype, device=pred_noise.device)
    else:
        m = np.asarray(m, dtype=np.float64)
    sq = (pred_noise - true_noise) ** 2
    if sq.ndim == 3:
        count = m.sum()
        if float(count) == 0:
            raise ValueError("mask is empty; masked loss undefined")
        # select, not multiply, so non-finite predictions outside the mask cannot leak in
        sel = sq[m.bool()] if torch_mode else sq[m.astype(bool)]
        return sel.sum() / count
    dims = tuple(range(1, sq.ndim))
    count = m.sum(dim=dims) if torch_mode else m.sum(axis=dims)
    if bool((count == 0).any()):
        raise ValueError("a mask in the batch is empty; masked loss undefined")
    zero = torch.zeros_like(sq) if torch_mode else np.zeros_like(sq)
    masked = torch.where(m.bool(), sq, zero) if torch_mode else np.where(m.astype(bool), sq, zero)
    per = masked.sum(dim=dims) / count if torch_mode else masked.sum(axis=dims) / count
    return per.mean()


# ---------------------------------------------------------------------------
# traversal
# ---------------------------------------------------------------------------

@dataclass
class PlanEntry:
    origin: Tuple[int, int, int]
    index: Tuple[int, int, int]
    shell: int
    mask: np.ndarray  # voxels this entry writes


@dataclass
class TraversalPlan:
    grid: PatchGrid
    entries: List[PlanEntry]
    skipped: List[Tuple[int, int, int]] = field(default_factory=list)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(repr((self.grid.volume_shape, self.grid.patch_size, self.grid.stride)).encode())
        for e in self.entries:
            h.update(repr(e.origin).encode())
            h.update(np.packbits(e.mask).tobytes())
        return h.hexdigest()[:16]

    def shells(self) -> List[List[PlanEntry]]:
        out: List[List[PlanEntry]] = []
        for e in self.entries:
            if not out or out[-1][0].shell != e.shell:
                out.append([])
            out[-1].append(e)
        return out


def _center_index(axis_origins, n, p):
    # patch whose center lies closest to the volume center; ties go to the lower index
    return min(range(len(axis_origins)), key=lambda i: (abs(2 * axis_origins[i] + p - n), i))


def plan_traversal(grid: PatchGrid) -> TraversalPlan:
    """Center-outward visiting order in shells of Chebyshev distance (in patch
    index space) from the center patch, ties broken by origin. Each entry
    writes the part of its patch that no earlier entry covered."""
    if not grid.origins:
        raise ValueError("empty patch grid")
    p = grid.patch_size
    center = tuple(_center_index(a, n, p) for a, n in zip(grid.axis_origins, grid.volume_shape))
    keyed = []
    for i, a in enumerate(grid.axis_origins[0]):
        for j, b in enumerate(grid.axis_origins[1]):
            for k, c in enumerate(grid.axis_origins[2]):
                idx = (i, j, k)
                shell = max(abs(u - v) for u, v in zip(idx, center))
                keyed.append((shell, (a, b, c), idx))
    keyed.sort()
    covered = np.zeros(grid.volume_shape, dtype=bool)
    entries, skipped = [], []
    for shell, origin, idx in keyed:
        sl = patch_slices(origin, p)
        mask = ~covered[sl]
        if not mask.any():
            skipped.append(origin)
            continue
        covered[sl] = True
        entries.append(PlanEntry(origin, idx, shell, mask))
    return TraversalPlan(grid, entries, skipped)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class RefinerSample:
    x_patch: np.ndarray
    x_hat_patch: np.ndarray
    y_prev: np.ndarray
    mask: Mask
    t: int


def _pair_arrays(pairs):
    xs, xhs = [], []
    for x, xh in pairs:
        x = x.data if isinstance(x, Volume) else np.asarray(x)
        xh = xh.data if isinstance(xh, Volume) else np.asarray(xh)
        if x.shape != xh.shape:
            raise ValueError(f"unpaired shapes {x.shape} vs {xh.shape}")
        xs.append(x)
        xhs.append(xh)
    if not xs:
        raise ValueError("empty training set")
    if len({a.shape for a in xs}) != 1:
        raise ValueError("all training volumes must share one shape")
    return np.stack(xs).astype(np.float32), np.stack(xhs).astype(np.float32)


def draw_refiner_batch(xs, xhs, idx, p, sched, rng: np.random.Generator, full_prob=0.1):
    """Random-origin patches with their masks, timesteps, diffusion noise and
    guidance noise, as float32 arrays of shape (B, 1, p, p, p)."""
    n = xs.shape[1:]
    b = len(idx)
    origins = np.stack([rng.integers(0, k - p + 1, size=b) for k in n], axis=1)
    x = np.empty((b, 1, p, p, p), np.float32)
    xh = np.empty_like(x)
    masks = np.empty_like(x, dtype=bool)
    kinds = []
    for i, (v, o) in enumerate(zip(idx, origins)):
        sl = patch_slices(o, p)
        x[i, 0] = xs[v][sl]
        xh[i, 0] = xhs[v][sl]
        kind = sample_mask_kind(rng, full_prob)
        kinds.append(kind)
        masks[i, 0] = make_mask(kind, p).data
    t = rng.integers(1, sched.T + 1, size=b)
    xi = rng.standard_normal(x.shape).astype(np.float32)
    g = rng.standard_normal(x.shape).astype(np.float32)
    return {"x": x, "x_hat": xh, "mask": masks, "kinds": kinds, "t": t, "xi": xi, "g": g, "origins": origins}


class RefinerNet(torch.nn.Module):
    """Noise predictor anchored on the coarse patch.

    With ``f`` the U-Net output, the noise estimate is
    ``sqrt(1-ab)*(x_t - sqrt(ab)*x_hat) + sqrt(ab)*f``. The implied clean estimate
    ``sqrt(ab)*x_t + (1-ab)*x_hat - sqrt(1-ab)*f`` never divides by ``sqrt(ab)``, so
    errors in ``f`` are not amplified at low signal-to-noise steps, and ``f = 0``
    falls back to the coarse patch. ``f`` is zero at initialization. Output and
    loss are unchanged: the module returns an epsilon estimate.
    """

    def __init__(self, spec: UNetSpec, sched: DiffusionSchedule):
        super().__init__()
        self.net = UNet3d(spec)
        torch.nn.init.zeros_(self.net.conv_out.weight)
        torch.nn.init.zeros_(self.net.conv_out.bias)
        self.register_buffer("alpha_bars", torch.tensor(sched.alpha_bars.tolist(), dtype=torch.float64),
                             persistent=False)

    @property
    def spec(self):
        return self.net.spec

    def forward(self, x, t):
        ab = self.alpha_bars[t - 1].to(x.dtype).view(-1, 1, 1, 1, 1)
        xt, xh = x[:, :1], x[:, 1:2]
        return (1 - ab).sqrt() * (xt - ab.sqrt() * xh) + ab.sqrt() * self.net(x, t)


def refiner_loss(model, batch, sched):
    x = torch.from_numpy(batch["x"])
    xh = torch.from_numpy(batch["x_hat"])
    m = torch.from_numpy(batch["mask"])
    t = torch.from_numpy(batch["t"])
    xi = torch.from_numpy(batch["xi"])
    y_prev = make_y_prev(x, m, torch.from_numpy(batch["g"]))
    xt = forward_diffuse(x, t, xi, sched)
    pred = model(torch.cat([xt, xh, y_prev], dim=1), t)
    return masked_diffusion_loss(pred, xi, m)


def train_refiner(pairs: Sequence, patch_size: int, spec: UNetSpec, sched: DiffusionSchedule, epochs: int,
                  lr: float = 1e-5, batch: int = 32, seed: int = 0, patches_per_volume: int = 1,
                  full_prob: float = 0.1, weight_decay: float = 0.0, resume: Optional[Checkpoint] = None,
                  on_epoch: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """One epoch draws ``patches_per_volume`` random patches from every (x, x_hat) pair."""
    xs, xhs = _pair_arrays(pairs)
    if patch_size > min(xs.shape[1:]):
        raise ValueError(f"patch size {patch_size} exceeds volume shape {xs.shape[1:]}")
    if spec.in_channels != 3 or spec.out_channels != 1:
        raise ValueError("refiner U-Net takes 3 input channels and predicts 1")
    torch.manual_seed(seed)
    model = RefinerNet(spec, sched)
    model.patch_size = patch_size
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    start = 0
    if resume is not None:
        model.load_state_dict(resume.state_dict())
        restore_optimizer(opt, resume)
        start = int(resume.extra.get("epoch", 0))
    rng = np.random.default_rng([seed, start])
    result = TrainResult(model, opt, [], start)
    model.train()
    for epoch in range(start, start + epochs):
        order = np.tile(rng.permutation(len(xs)), patches_per_volume)
        total = 0.0
        for i in range(0, len(order), batch):
            idx = order[i:i + batch]
            loss = refiner_loss(model, draw_refiner_batch(xs, xhs, idx, patch_size, sched, rng, full_prob), sched)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        result.history.append(total / len(order))
        result.epoch = epoch + 1
        if on_epoch:
            on_epoch(epoch + 1, result.history[-1])
        log.info("refiner epoch %d masked eps-mse %.5f", epoch + 1, result.history[-1])
    model.eval()
    return result


@torch.no_grad()
def refiner_validation_loss(model, pairs, sched, seed: int = 0, n_patches: int = 64, full_prob: float = 0.1) -> float:
    xs, xhs = _pair_arrays(pairs)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(xs), size=n_patches)
    return float(refiner_loss(model, draw_refiner_batch(xs, xhs, idx, model.patch_size, sched, rng, full_prob), sched))


def save_refiner(path, result: TrainResult, sched: DiffusionSchedule, overwrite=False) -> Checkpoint:
    cfg = {"spec": result.model.spec.to_dict(), "schedule": sched.config(), "patch_size": result.model.patch_size}
    return save_checkpoint(path, "refiner", cfg, result.model,
                           {"epoch": result.epoch, "history": result.history}, result.optimizer, overwrite)


def load_refiner(path_or_ckpt):
    """Returns ``(model, schedule)``."""
    ckpt = path_or_ckpt if isinstance(path_or_ckpt, Checkpoint) else load_checkpoint(path_or_ckpt, "refiner")
    sched = schedule_from_config(ckpt.config["schedule"])
    model = RefinerNet(UNetSpec(**ckpt.config["spec"]), sched)
    model.load_state_dict(ckpt.state_dict())
    model.patch_size = int(ckpt.config["patch_size"])
    return model.eval(), sched


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def _randn(gens, shape):
    return torch.stack([torch.randn(shape, generator=g) for g in gens])[:, None]


@torch.no_grad()
def _reverse_chain(model, x_hat, y_prev, sched, gens):
    """Full ancestral chain from pure noise, conditioned on (x_hat, y_prev); all (B, 1, p, p, p)."""
    p = x_hat.shape[-1]
    x = _randn(gens, (p, p, p))
    for t in range(sched.T, 0, -1):
        tt = torch.full((x.shape[0],), t, dtype=torch.long)
        eps = model(torch.cat([x, x_hat, y_prev], dim=1), tt)
        x0 = x0_from_eps(x, eps, tt, sched)
        x = ddpm_step(x, x0, t, sched, _randn(gens, (p, p, p)) if t > 1 else None)
    return x


def _check_patch(model, arr):
    p = getattr(model, "patch_size", None)
    if p is not None and tuple(arr.shape[-3:]) != (p, p, p):
        raise ValueError(f"patch shape {tuple(arr.shape[-3:])} does not match the model's training patch size {p}")


def refine_patch(model, x_hat_patch, y_prev, sched: DiffusionSchedule, seed: int) -> np.ndarray:
    """Run the reverse chain for a single patch; deterministic given ``seed``."""
    x_hat_patch = np.asarray(x_hat_patch, dtype=np.float32)
    y_prev = np.asarray(y_prev, dtype=np.float32)
    _check_patch(model, x_hat_patch)
    if x_hat_patch.shape != y_prev.shape:
        raise ValueError(f"shape mismatch {x_hat_patch.shape} vs {y_prev.shape}")
    gen = torch.Generator().manual_seed(int(seed))
    out = _reverse_chain(model, torch.from_numpy(x_hat_patch)[None, None], torch.from_numpy(y_prev)[None, None],
                         sched, [gen])
    return out[0, 0].numpy()


def refine_volumes(model, x_hats: Sequence, grid: PatchGrid, sched: DiffusionSchedule, seeds: Sequence[int],
                   mode: str = "sequential", write_counts: Optional[np.ndarray] = None) -> List[Volume]:
    """Refine a batch of coarse volumes along the traversal plan of ``grid``.

    For every plan entry the guidance patch holds already-refined canvas
    voxels where available and fresh Gaussian noise elsewhere; refined voxels
    are written only where the entry's mask is true. ``mode="shell"`` runs
    all entries of one Chebyshev shell together, conditioning each on the
    canvas as it stood when the shell began. The chain state is never
    clipped, so outputs may leave [-1, 1] slightly; export clips them.

    ``write_counts`` (volume-shaped int array) is incremented at every write
    of the first volume.
    """
    vols = [v if isinstance(v, Volume) else Volume(np.asarray(v)) for v in x_hats]
    if len(vols) != len(seeds):
        raise ValueError("need one seed per volume")
    if not vols:
        return []
    for v in vols:
        if v.shape != grid.volume_shape:
            raise ValueError(f"volume shape {v.shape} does not match grid shape {grid.volume_shape}")
    p = grid.patch_size
    _check_patch(model, np.empty((p, p, p)))
    plan = plan_traversal(grid)
    if mode == "sequential":
        groups = [[e] for e in plan.entries]
    elif mode == "shell":
        groups = plan.shells()
    else:
        raise ValueError(f"unknown mode {mode!r}")
    gens = [torch.Generator().manual_seed(int(s)) for s in seeds]
    xh = np.stack([v.data for v in vols]).astype(np.float32)
    canvas = np.zeros_like(xh)
    written = np.zeros(grid.volume_shape, dtype=bool)
    for group in groups:
        snapshot = written.copy()
        cond_x, cond_y, owners = [], [], []
        for e in group:
            sl = (slice(None),) + patch_slices(e.origin, p)
            known = torch.from_numpy(snapshot[sl[1:]].astype(np.float32))
            g = _randn(gens, (p, p, p))
            y_prev = make_y_prev(torch.from_numpy(canvas[sl])[:, None], 1 - known.expand(g.shape), g)
            cond_x.append(torch.from_numpy(xh[sl])[:, None])
            cond_y.append(y_prev)
        x_hat_b = torch.cat(cond_x)
        y_prev_b = torch.cat(cond_y)
        chain_gens = gens * len(group)
        out = _reverse_chain(model, x_hat_b, y_prev_b, sched, chain_gens).numpy()[:, 0]
        for gi, e in enumerate(group):
            res = out[gi * len(vols):(gi + 1) * len(vols)]
            for vi in range(len(vols)):
                insert_patch(canvas[vi], e.origin, res[vi], e.mask)
            written[patch_slices(e.origin, p)] |= e.mask
            if write_counts is not None:
                write_counts[patch_slices(e.origin, p)] += e.mask
    if not written.all():
        raise RuntimeError("traversal left voxels unwritten")
    return [Volume(c, v.spacing, (-1.0, 1.0)) for c, v in zip(canvas, vols)]


def refine_volume(model, x_hat, grid: PatchGrid, sched: DiffusionSchedule, seed: int, mode: str = "sequential",
                  write_counts: Optional[np.ndarray] = None) -> Volume:
    return refine_volumes(model, [x_hat], grid, sched, [seed], mode, write_counts)[0]


def provenance(plan: TraversalPlan, seed: int, checkpoint_ids: dict, extra: Optional[dict] = None) -> dict:
    rec = {
        "plan_hash": plan.digest(),
        "seed": int(seed),
        "checkpoints": dict(checkpoint_ids),
        "grid": {"volume_shape": list(plan.grid.volume_shape), "patch_size": plan.grid.patch_size,
                 "stride": plan.grid.stride, "n_entries": len(plan.entries)},
    }
    if extra:
        rec.update(extra)
    return rec
