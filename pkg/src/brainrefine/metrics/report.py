"""Batch evaluation of image sets into a JSON metric report."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from ..phantom import region_from_labels
from ..volume import LABELS_SUFFIX, list_volumes, load_labels, load_volume
from .distribution import coverage_density, fid
from .hog import hog_similarity
from .noise import extract_noise, noise_kl
from .perceptual import RandomConvBackbone, lpips_patches, patch_features
from .sharpness import laplacian_variance_sharpness

SCHEMA = "brainrefine-metric-report/1"
PAIRED_SETS = ("recon", "refined")
DEFAULT_PROTOCOL = {
    "axes": [0, 1, 2],
    "seed": 0,
    "lpips": {"n": 1000, "patch": 64},
    "sharpness": {"n": 1000, "patch": 64, "sigma": 0.5},
    "noise": {"smooth_sigma": 1.0, "bins": 64, "regions": ["white-matter", "ventricle"]},
    "hog": {"cell": 8, "orient_bins": 9, "regions": ["whole-brain", "cerebellum"]},
    "features": {"n_per_volume": 50, "patch": 64, "k": [5, 10, 20]},
    "backbone": {"kind": "random-conv", "channels": [16, 32, 64], "seed": 0},
}


def merge(base: dict, over: Optional[dict]) -> dict:
    out = json.loads(json.dumps(base))
    for k, v in (over or {}).items():
        out[k] = merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def make_backbone(cfg: dict):
    if cfg.get("kind", "random-conv") != "random-conv":
        raise ValueError(f"unknown backbone kind {cfg.get('kind')!r}; pass a backbone object instead")
    return RandomConvBackbone(tuple(cfg["channels"]), seed=int(cfg["seed"]))


def _load_set(directory) -> Dict[str, np.ndarray]:
    if directory is None:
        return {}
    directory = Path(directory)
    return {i: load_volume(directory / i).data for i in list_volumes(directory)}


def _params(base, **kw):
    out = {k: v for k, v in base.items() if k != "regions"}
    out.update(kw)
    return out


def _row(metric, set_name, axis, value, params, seed, ids, **extra):
    row = {"metric": metric, "set": set_name, "axis": axis, "value": value, "params": params, "seed": seed,
           "n_samples": len(ids), "inputs": list(ids), "status": "ok"}
    row.update(extra)
    return row


def _skip(metric, set_name, reason, axis=None):
    return {"metric": metric, "set": set_name, "axis": axis, "value": None, "status": "skipped", "reason": reason}


def evaluate_sets(orig_dir, recon_dir=None, refined_dir=None, synth_dir=None, refined_synth_dir=None,
                  protocol: Optional[dict] = None, backbone=None) -> dict:
    """Run the metric suite over volume directories.

    ``recon`` and ``refined`` volumes are paired with originals by file id
    and feed the paired metrics (LPIPS, HOG distance, noise KL). Every set
    gets sharpness; every non-original set is compared with the originals
    through FID, coverage and density on pooled 2D patch features.
    Regions come from the originals' label files.
    """
    proto = merge(DEFAULT_PROTOCOL, protocol)
    seed = int(proto["seed"])
    if backbone is None:
        backbone = make_backbone(proto["backbone"])
    orig = _load_set(orig_dir)
    if not orig:
        raise ValueError(f"no volumes found in {orig_dir}")
    sets = {"orig": orig, "recon": _load_set(recon_dir), "refined": _load_set(refined_dir),
            "synth": _load_set(synth_dir), "refined_synth": _load_set(refined_synth_dir)}
    dirs = {"orig": orig_dir, "recon": recon_dir, "refined": refined_dir, "synth": synth_dir,
            "refined_synth": refined_synth_dir}
    rows: List[dict] = []
    ids = sorted(orig)

    labels = {}
    for i in ids:
        lab = Path(orig_dir) / (i + LABELS_SUFFIX)
        if lab.exists():
            labels[i] = load_labels(Path(orig_dir) / i, orig[i].shape)

    lp, sh, nz, hg, ft = (proto[k] for k in ("lpips", "sharpness", "noise", "hog", "features"))
    noise_orig = {i: extract_noise(orig[i], nz["smooth_sigma"]) for i in ids}

    for name in PAIRED_SETS:
        cand = sets[name]
        if dirs[name] is None:
            continue
        pairs = [i for i in ids if i in cand]
        missing = [i for i in ids if i not in cand]
        if not pairs:
            for m in ("lpips", "noise_kl", "hog"):
                rows.append(_skip(m, name, f"no volumes in {dirs[name]} pair with originals"))
            continue
        if missing:
            rows.append(_skip("pairing", name, f"originals without a {name} counterpart: {missing}"))
        for axis in proto["axes"]:
            vals = [lpips_patches(orig[i], cand[i], lp["n"], lp["patch"], axis, backbone, [seed, k])
                    for k, i in enumerate(pairs)]
            rows.append(_row("lpips", name, axis, float(np.mean(vals)), dict(lp, backbone=backbone.tag()), seed,
                             pairs, per_volume=vals))
        for region in nz["regions"]:
            have = [i for i in pairs if i in labels]
            if not have:
                rows.append(_skip("noise_kl", name, f"no label files for region {region!r}"))
                continue
            vals = [noise_kl(noise_orig[i], extract_noise(cand[i], nz["smooth_sigma"]),
                             region_from_labels(labels[i], region).check(orig[i].shape), nz["bins"]) for i in have]
            rows.append(_row("noise_kl", name, None, float(np.mean(vals)),
                             _params(nz, region=region, direction="KL(original || candidate)"), seed,
                             have, per_volume=vals))
        for region in hg["regions"]:
            have = [i for i in pairs if i in labels]
            if not have:
                rows.append(_skip("hog", name, f"no label files for region {region!r}"))
                continue
            for axis in proto["axes"]:
                used, vals, problems = [], [], []
                for i in have:
                    try:
                        vals.append(hog_similarity(orig[i], cand[i], region_from_labels(labels[i], region), axis,
                                                   hg["cell"], hg["orient_bins"]))
                        used.append(i)
                    except ValueError as exc:  # region too small for one cell at this resolution
                        problems.append(f"{i}: {exc}")
                if problems:
                    rows.append(_skip("hog", name, "; ".join(problems), axis) | {"region": region})
                if used:
                    rows.append(_row("hog", name, axis, float(np.mean(vals)), _params(hg, region=region),
                                     seed, used, per_volume=vals))

    for name, vols in sets.items():
        if not vols:
            if dirs[name] is not None:
                rows.append(_skip("sharpness", name, f"no volumes in {dirs[name]}"))
            continue
        vid = sorted(vols)
        vals = [laplacian_variance_sharpness(vols[i], sh["sigma"], sh["patch"], sh["n"], seed) for i in vid]
        rows.append(_row("sharpness", name, None, float(np.mean(vals)), sh, seed, vid, per_volume=vals))

    for axis in proto["axes"]:
        f_orig = patch_features([orig[i] for i in ids], axis, ft["patch"], ft["n_per_volume"], backbone, seed)
        for name in ("recon", "refined", "synth", "refined_synth"):
            vols = sets[name]
            if not vols:
                continue
            vid = sorted(vols)
            f = patch_features([vols[i] for i in vid], axis, ft["patch"], ft["n_per_volume"], backbone, seed)
            params = {"patch": ft["patch"], "n_per_volume": ft["n_per_volume"], "backbone": backbone.tag(),
                      "n_real": len(f_orig.features), "n_gen": len(f.features)}
            rows.append(_row("fid", name, axis, fid(f_orig, f), params, seed, vid))
            for k in ft["k"]:
                if k >= len(f_orig.features):
                    rows.append(_skip("coverage", name, f"k={k} needs more than {len(f_orig.features)} real rows", axis))
                    continue
                cov, den = coverage_density(f_orig, f, k)
                rows.append(_row("coverage", name, axis, cov, dict(params, k=k), seed, vid))
                rows.append(_row("density", name, axis, den, dict(params, k=k), seed, vid))

    return {"schema": SCHEMA, "protocol": proto,
            "sets": {k: (sorted(v) if v else []) for k, v in sets.items()}, "rows": rows}


def write_report(report: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return path


def lookup(report: dict, metric: str, set_name: str, axis=None, **params):
    for r in report["rows"]:
        if r["metric"] != metric or r["set"] != set_name or r.get("axis") != axis or r["status"] != "ok":
            continue
        if all(r["params"].get(k) == v for k, v in params.items()):
            return r["value"]
    raise KeyError(f"no row for {metric}/{set_name}/axis={axis}/{params}")


def summary_table(report: dict) -> str:
    """Plain-text result tables, one column per slicing axis (dim0/dim1/dim2)."""
    axes = report["protocol"]["axes"]
    ok = [r for r in report["rows"] if r["status"] == "ok"]
    lines = []

    def block(title, keyfn, sets):
        groups = {}
        for r in ok:
            key = keyfn(r)
            if key is not None and r["set"] in sets:
                groups.setdefault(key, {}).setdefault(r["set"], {})[r["axis"]] = r["value"]
        for key in sorted(groups, key=str):
            lines.append(f"{title} {key}".rstrip())
            head = "set".ljust(14) + "".join(f"dim{a}".rjust(12) for a in axes)
            lines.append(head)
            for s in sets:
                if s in groups[key]:
                    vals = groups[key][s]
                    lines.append(s.ljust(14) + "".join(f"{vals.get(a, float('nan')):12.4f}" for a in axes))
            lines.append("")

    block("LPIPS", lambda r: "" if r["metric"] == "lpips" else None, PAIRED_SETS)
    block("HOG distance", lambda r: r["params"]["region"] if r["metric"] == "hog" else None, PAIRED_SETS)
    for metric in ("fid", "coverage", "density"):
        block(metric.upper() if metric == "fid" else metric.capitalize(),
              (lambda m: lambda r: (f"k={r['params']['k']}" if "k" in r["params"] else "") if r["metric"] == m else None)(metric),
              ("recon", "refined", "synth", "refined_synth"))
    kl = [r for r in ok if r["metric"] == "noise_kl"]
    if kl:
        lines.append("Noise KL (original || candidate)")
        for r in kl:
            lines.append(f"{r['set']:<14}{r['params']['region']:<16}{r['value']:12.4f}")
        lines.append("")
    shp = [r for r in ok if r["metric"] == "sharpness"]
    if shp:
        lines.append("Sharpness (Laplacian variance)")
        for r in shp:
            lines.append(f"{r['set']:<14}{r['value']:12.6f}")
        lines.append("")
    skipped = [r for r in report["rows"] if r["status"] != "ok"]
    for r in skipped:
        lines.append(f"skipped {r['metric']} [{r['set']}]: {r['reason']}")
    return "\n".join(lines).rstrip() + "\n"
