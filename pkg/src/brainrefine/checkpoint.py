"""Versioned checkpoint container.

A checkpoint is an uncompressed NumPy ``.npz`` archive, i.e. a zip of
``.npy`` files, so it is readable from any language with a zip and npy
reader. Members:

``__meta__``
    uint8 array holding UTF-8 JSON: ``{"format": "brainrefine-checkpoint",
    "version": 1, "kind": ..., "config": {...}, "extra": {...},
    "param_names": [...], "optim_groups": [...] | null}``.
``param/<name>``
    one float32 array per model parameter or buffer, named as in the
    model's state dict (dots kept).
``optim/<index>/<key>``
    optional optimizer moments for resuming training.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

FORMAT = "brainrefine-checkpoint"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    kind: str
    config: dict
    params: dict
    extra: dict = field(default_factory=dict)
    optim_state: Optional[dict] = None

    @property
    def id(self) -> str:
        return params_digest(self.kind, self.config, self.params)

    def state_dict(self) -> dict:
        return {k: torch.from_numpy(np.array(v)) for k, v in self.params.items()}


def params_digest(kind: str, config: dict, params: dict) -> str:
    h = hashlib.sha256()
    h.update(kind.encode())
    h.update(json.dumps(config, sort_keys=True).encode())
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name])
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()[:16]


def save_checkpoint(path, kind: str, config: dict, model: torch.nn.Module, extra: Optional[dict] = None,
                    optimizer: Optional[torch.optim.Optimizer] = None, overwrite: bool = False) -> Checkpoint:
    path = Path(path)
    if path.exists() and not overwrite:
        raise CheckpointError(f"{path} exists; checkpoints are write-once")
    params = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
    arrays = {f"param/{k}": v for k, v in params.items()}
    optim_groups = None
    optim_state = None
    if optimizer is not None:
        sd = optimizer.state_dict()
        optim_groups = sd["param_groups"]
        optim_state = {}
        for idx, st in sd["state"].items():
            for key, val in st.items():
                arr = val.detach().cpu().numpy() if isinstance(val, torch.Tensor) else np.asarray(val)
                arrays[f"optim/{idx}/{key}"] = arr
                optim_state.setdefault(int(idx), {})[key] = arr
    meta = {
        "format": FORMAT,
        "version": VERSION,
        "kind": kind,
        "config": config,
        "extra": extra or {},
        "param_names": list(params),
        "optim_groups": optim_groups,
    }
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".partial")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)
    return Checkpoint(kind, config, params, extra or {}, {"groups": optim_groups, "state": optim_state} if optimizer else None)


def load_checkpoint(path, kind: Optional[str] = None) -> Checkpoint:
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as npz:
            meta = json.loads(bytes(npz["__meta__"]).decode())
            arrays = {k: npz[k] for k in npz.files if k != "__meta__"}
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: not a readable checkpoint ({exc})") from exc
    if meta.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unknown format {meta.get('format')!r}")
    if meta.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported version {meta.get('version')}")
    if kind is not None and meta["kind"] != kind:
        raise CheckpointError(f"{path}: expected a {kind!r} checkpoint, found {meta['kind']!r}")
    params = {name: arrays[f"param/{name}"] for name in meta["param_names"]}
    optim = None
    if meta.get("optim_groups") is not None:
        state = {}
        for key, arr in arrays.items():
            if key.startswith("optim/"):
                _, idx, name = key.split("/", 2)
                state.setdefault(int(idx), {})[name] = arr
        optim = {"groups": meta["optim_groups"], "state": state}
    return Checkpoint(meta["kind"], meta["config"], params, meta.get("extra", {}), optim)


def restore_optimizer(optimizer: torch.optim.Optimizer, ckpt: Checkpoint) -> None:
    if not ckpt.optim_state:
        return
    state = {idx: {k: torch.from_numpy(np.array(v)) for k, v in st.items()}
             for idx, st in ckpt.optim_state["state"].items()}
    optimizer.load_state_dict({"state": state, "param_groups": ckpt.optim_state["groups"]})
