"""Stage-wise orchestration of the two-stage pipeline on disk.

Layout under a work directory::

    data/{train,test}/   phantoms (+ labels) and split.json
    checkpoints/         ae.npz, ldm.npz, refiner.npz
    logs/                <stage>.csv training curves
    recon/ refined/      test-set reconstructions and their refinements
    synth/ refined_synth/  LDM samples and their refinements
    report.json, report.txt
"""
from __future__ import annotations

import contextlib
import json
import logging
import zlib
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import generator, refiner
from .checkpoint import load_checkpoint
from .diffusion import schedule_from_config
from .metrics.report import evaluate_sets, summary_table, write_report
from .nets import AutoencoderSpec, UNetSpec
from .phantom import make_dataset
from .volume import Volume, build_patch_grid, list_volumes, load_volume, read_sidecar, save_volume

log = logging.getLogger(__name__)

STAGES = ("ae", "ldm", "refiner")
CKPT_NAMES = {"ae": "ae.npz", "ldm": "ldm.npz", "refiner": "refiner.npz"}
PREREQS = {"ae": (), "ldm": ("ae",), "refiner": ("ae",)}


class MissingStage(RuntimeError):
    def __init__(self, stage: str, path):
        super().__init__(f"missing prerequisite stage {stage!r}: no checkpoint at {path}")
        self.stage = stage


class ShapeMismatch(ValueError):
    pass


def setup_torch():
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


def volume_seed(seed: int, vid: str) -> int:
    return int(np.random.SeedSequence([int(seed), zlib.crc32(vid.encode())]).generate_state(1)[0])


@contextlib.contextmanager
def partial_marker(directory: Path):
    """Leaves ``<dir>/.partial`` behind if the block fails."""
    directory.mkdir(parents=True, exist_ok=True)
    marker = directory / ".partial"
    marker.write_text("incomplete output\n")
    yield directory
    marker.unlink()


def ckpt_path(work: Path, stage: str) -> Path:
    return Path(work) / "checkpoints" / CKPT_NAMES[stage]


def _require(work: Path, stage: str) -> Path:
    for pre in PREREQS[stage]:
        p = ckpt_path(work, pre)
        if not p.exists():
            raise MissingStage(pre, p)
    return ckpt_path(work, stage)


def _load_dir(directory: Path):
    ids = list_volumes(directory)
    return ids, [load_volume(directory / i) for i in ids]


def _save(vol: Volume, directory: Path, vid: str, prov: Optional[dict] = None):
    out = Volume(np.clip(vol.data, -1.0, 1.0), vol.spacing, (-1.0, 1.0))
    save_volume(out, directory / vid)
    if prov is not None:
        (directory / f"{vid}.provenance.json").write_text(json.dumps(prov, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def make_data(cfg: dict, work) -> Path:
    d = cfg["data"]
    out = Path(work) / "data"
    with partial_marker(out):
        make_dataset(out, int(d["n"]), tuple(d["shape"]), float(d["noise_sigma"]), float(d["texture_amp"]),
                     tuple(d["split"]), base_seed=int(cfg["seed"]) * 100003)
    return out


def _log_epoch(path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    if not path.exists():
        path.write_text("epoch,loss\n")

    def write(epoch, loss):
        with open(path, "a") as fh:
            fh.write(f"{epoch},{loss:.8g}\n")
    return write


def _train_volumes(work: Path):
    ids, vols = _load_dir(Path(work) / "data" / "train")
    if not vols:
        raise FileNotFoundError(f"no training volumes in {Path(work) / 'data' / 'train'}; run make-data first")
    return vols


def train(cfg: dict, work, stage: str, resume: bool = False):
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    setup_torch()
    work = Path(work)
    out = _require(work, stage)
    prior = load_checkpoint(out) if (resume and out.exists()) else None
    if out.exists() and not resume:
        raise FileExistsError(f"{out} exists; pass --resume to continue training")
    logger = _log_epoch(work / "logs" / f"{stage}.csv")
    seed = int(cfg["seed"])
    vols = _train_volumes(work)

    if stage == "ae":
        c = cfg["autoencoder"]
        spec = AutoencoderSpec(tuple(c["channels"]), 4, int(c["num_res_blocks"]), c["activation"], float(c["kl_weight"]))
        res = generator.train_autoencoder(vols, spec, int(c["epochs"]), float(c["lr"]), int(c["batch"]),
                                          float(c["weight_decay"]), seed, prior, logger)
        return generator.save_autoencoder(out, res, overwrite=resume)

    ae = generator.load_autoencoder(ckpt_path(work, "ae"))
    if stage == "ldm":
        c = cfg["ldm"]
        sched = schedule_from_config(c["schedule"])
        latents = [generator.encode(ae, v) for v in vols]
        spec = UNetSpec(4, 4, tuple(c["channels"]), int(c["num_res_blocks"]), tuple(c["attention"]))
        scale = float(prior.config["latent_scale"]) if prior else None
        res = generator.train_latent_ddpm(latents, spec, sched, int(c["epochs"]), float(c["lr"]), int(c["batch"]),
                                          seed, scale, float(c["weight_decay"]), prior, logger)
        return generator.save_ldm(out, res, sched, overwrite=resume)

    c = cfg["refiner"]
    sched = schedule_from_config(c["schedule"])
    recon = generator.reconstruct(ae, vols)
    spec = UNetSpec(3, 1, tuple(c["channels"]), int(c["num_res_blocks"]), tuple(c["attention"]))
    res = refiner.train_refiner(list(zip(vols, recon)), int(c["patch_size"]), spec, sched, int(c["epochs"]),
                                float(c["lr"]), int(c["batch"]), seed, int(c["patches_per_volume"]),
                                float(c["full_prob"]), float(c["weight_decay"]), prior, logger)
    return refiner.save_refiner(out, res, sched, overwrite=resume)


def reconstruct(cfg: dict, work, in_dir=None, out_dir=None) -> Path:
    setup_torch()
    work = Path(work)
    in_dir = Path(in_dir) if in_dir else work / "data" / "test"
    out_dir = Path(out_dir) if out_dir else work / "recon"
    path = ckpt_path(work, "ae")
    if not path.exists():
        raise MissingStage("ae", path)
    ae_ckpt = load_checkpoint(path, "autoencoder")
    ae = generator.load_autoencoder(ae_ckpt)
    ids, vols = _load_dir(in_dir)
    with partial_marker(out_dir):
        for vid, v in zip(ids, vols):
            _check_shape(v.shape, cfg)
            out = generator.reconstruct(ae, [v])[0]
            _save(out, out_dir, vid, {"source": str(in_dir / vid), "checkpoints": {"ae": ae_ckpt.id}})
    return out_dir


def _check_shape(shape, cfg):
    want = tuple(cfg["data"]["shape"])
    if tuple(shape) != want:
        raise ShapeMismatch(f"volume shape {tuple(shape)} does not match configured shape {want}")


def generate(cfg: dict, work, n: Optional[int] = None, seed: Optional[int] = None, out_dir=None) -> Path:
    setup_torch()
    work = Path(work)
    n = int(cfg["generate"]["n"]) if n is None else int(n)
    seed = int(cfg["seed"]) if seed is None else int(seed)
    out_dir = Path(out_dir) if out_dir else work / "synth"
    with partial_marker(out_dir):
        if n == 0:
            return out_dir
        for stage in ("ae", "ldm"):
            if not ckpt_path(work, stage).exists():
                raise MissingStage(stage, ckpt_path(work, stage))
        ae_ckpt = load_checkpoint(ckpt_path(work, "ae"), "autoencoder")
        ldm_ckpt = load_checkpoint(ckpt_path(work, "ldm"), "latent_ddpm")
        ae = generator.load_autoencoder(ae_ckpt)
        ldm, sched = generator.load_ldm(ldm_ckpt)
        ids = [f"synth_{i:05d}" for i in range(n)]
        seeds = [volume_seed(seed, i) for i in ids]
        spacing = tuple(read_sidecar(work / "data" / "train" / list_volumes(work / "data" / "train")[0])["spacing"]) \
            if (work / "data" / "train").exists() and list_volumes(work / "data" / "train") else (1.0, 1.0, 1.0)
        vols = generator.generate(ae, ldm, sched, tuple(cfg["data"]["shape"]), seeds, spacing)
        for vid, s, v in zip(ids, seeds, vols):
            _save(v, out_dir, vid, {"seed": s, "checkpoints": {"ae": ae_ckpt.id, "ldm": ldm_ckpt.id}})
    return out_dir


def refine(cfg: dict, work, in_dir, out_dir, seed: Optional[int] = None, batch: int = 40) -> Path:
    setup_torch()
    work = Path(work)
    seed = int(cfg["seed"]) if seed is None else int(seed)
    path = ckpt_path(work, "refiner")
    if not path.exists():
        raise MissingStage("refiner", path)
    ckpt = load_checkpoint(path, "refiner")
    model, sched = refiner.load_refiner(ckpt)
    c = cfg["refiner"]
    if int(c["patch_size"]) != model.patch_size:
        raise ShapeMismatch(f"config patch size {c['patch_size']} does not match checkpoint patch size {model.patch_size}")
    ids, vols = _load_dir(Path(in_dir))
    out_dir = Path(out_dir)
    with partial_marker(out_dir):
        if not vols:
            return out_dir
        for v in vols:
            _check_shape(v.shape, cfg)
        grid = build_patch_grid(vols[0].shape, model.patch_size, int(c["stride"]))
        plan = refiner.plan_traversal(grid)
        for i in range(0, len(vols), batch):
            chunk_ids = ids[i:i + batch]
            seeds = [volume_seed(seed, vid) for vid in chunk_ids]
            outs = refiner.refine_volumes(model, vols[i:i + batch], grid, sched, seeds, c["mode"])
            for vid, s, v in zip(chunk_ids, seeds, outs):
                _save(v, out_dir, vid, refiner.provenance(plan, s, {"refiner": ckpt.id},
                                                          {"source": str(Path(in_dir) / vid), "mode": c["mode"]}))
    return out_dir


def evaluate(cfg: dict, work, orig_dir=None, recon_dir=None, refined_dir=None, synth_dir=None,
             refined_synth_dir=None, out=None) -> dict:
    setup_torch()
    work = Path(work)
    proto = dict(cfg["metrics"], seed=int(cfg["seed"]))
    report = evaluate_sets(orig_dir or work / "data" / "test", recon_dir, refined_dir, synth_dir,
                           refined_synth_dir, proto)
    out = Path(out) if out else work / "report.json"
    write_report(report, out)
    out.with_suffix(".txt").write_text(summary_table(report))
    return report


def run_all(cfg: dict, work) -> dict:
    """make-data -> train ae/ldm/refiner -> reconstruct -> generate -> refine -> evaluate."""
    work = Path(work)
    make_data(cfg, work)
    for stage in STAGES:
        train(cfg, work, stage)
    reconstruct(cfg, work)
    generate(cfg, work)
    refine(cfg, work, work / "recon", work / "refined")
    refine(cfg, work, work / "synth", work / "refined_synth")
    return evaluate(cfg, work, work / "data" / "test", work / "recon", work / "refined", work / "synth",
                    work / "refined_synth")
