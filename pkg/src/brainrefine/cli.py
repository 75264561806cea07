"""Command-line entry point: ``brainrefine <verb> [options]``.

Exit codes: 0 success, 1 internal error, 2 usage or input error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .checkpoint import CheckpointError
from .config import ConfigError, load_config
from .metrics.report import summary_table
from .volume import VolumeError, list_volumes, load_volume

log = logging.getLogger("brainrefine")


class UsageError(Exception):
    pass


def export_slices(volume_path, axis: int, index, out_dir) -> Path:
    """Write one slice as an 8-bit grayscale PNG, intensity window [-1, 1]."""
    from PIL import Image

    vol = load_volume(volume_path)
    if axis not in (0, 1, 2):
        raise UsageError(f"axis must be 0, 1 or 2, got {axis}")
    n = vol.shape[axis]
    index = n // 2 if index is None else int(index)
    if not 0 <= index < n:
        raise UsageError(f"slice index {index} outside 0..{n - 1}")
    plane = np.take(vol.data, index, axis=axis)
    img = np.rint((np.clip(plane, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(volume_path).name.split(".")[0]
    out = out_dir / f"{stem}_axis{axis}_{index:03d}.png"
    Image.fromarray(img, mode="L").save(out)
    return out


def _shape(text):
    parts = [int(p) for p in text.replace("x", ",").split(",") if p]
    if len(parts) == 1:
        parts *= 3
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"shape must be N or D,H,W, got {text!r}")
    return parts


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment YAML (defaults apply to missing keys)")
    common.add_argument("--seed", type=int, help="global seed override")
    common.add_argument("--out", type=Path, default=Path("runs/default"), help="work directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="brainrefine", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="verb", required=True)

    s = sub.add_parser("make-data", parents=[common], help="write a phantom dataset")
    s.add_argument("--n", type=int)
    s.add_argument("--shape", type=_shape)

    s = sub.add_parser("train", parents=[common], help="train one stage")
    s.add_argument("stage", choices=pipeline.STAGES)
    s.add_argument("--resume", action="store_true", help="continue from the stage's checkpoint")

    s = sub.add_parser("reconstruct", parents=[common], help="autoencoder reconstructions")
    s.add_argument("--in", dest="in_dir", type=Path)
    s.add_argument("--to", dest="to_dir", type=Path)

    s = sub.add_parser("generate", parents=[common], help="sample coarse volumes from the latent DDPM")
    s.add_argument("--n", type=int)
    s.add_argument("--to", dest="to_dir", type=Path)

    s = sub.add_parser("refine", parents=[common], help="patch-wise refinement of coarse volumes")
    s.add_argument("--in", dest="in_dir", type=Path, required=True)
    s.add_argument("--to", dest="to_dir", type=Path, required=True)

    s = sub.add_parser("evaluate", parents=[common], help="metric report over image sets")
    s.add_argument("--orig", type=Path)
    s.add_argument("--recon", type=Path)
    s.add_argument("--refined", type=Path)
    s.add_argument("--synth", type=Path)
    s.add_argument("--refined-synth", type=Path)
    s.add_argument("--report", type=Path, help="report path (default <out>/report.json)")

    s = sub.add_parser("export-slices", parents=[common], help="write a slice as 8-bit PNG")
    s.add_argument("volume", type=Path)
    s.add_argument("--axis", type=int, default=0)
    s.add_argument("--index", type=int)
    s.add_argument("--to", dest="to_dir", type=Path)
    return p


def run(args) -> int:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "n", None) is not None and args.verb == "make-data":
        overrides["data"] = {"n": args.n}
    if getattr(args, "shape", None) is not None:
        overrides.setdefault("data", {})["shape"] = args.shape
    cfg = load_config(args.config, overrides)
    work = args.out

    if args.verb == "make-data":
        try:
            work.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise UsageError(f"cannot create output directory {work}: {exc}") from exc
        pipeline.make_data(cfg, work)
    elif args.verb == "train":
        pipeline.train(cfg, work, args.stage, resume=args.resume)
    elif args.verb == "reconstruct":
        pipeline.reconstruct(cfg, work, args.in_dir, args.to_dir)
    elif args.verb == "generate":
        pipeline.generate(cfg, work, args.n, out_dir=args.to_dir)
    elif args.verb == "refine":
        if not args.in_dir.is_dir():
            raise UsageError(f"input directory {args.in_dir} does not exist")
        pipeline.refine(cfg, work, args.in_dir, args.to_dir)
    elif args.verb == "evaluate":
        orig = args.orig or work / "data" / "test"
        if not orig.is_dir() or not list_volumes(orig):
            raise UsageError(f"no original volumes in {orig}")
        report = pipeline.evaluate(cfg, work, orig, args.recon, args.refined, args.synth, args.refined_synth,
                                   args.report)
        sys.stdout.write(summary_table(report))
    elif args.verb == "export-slices":
        out = export_slices(args.volume, args.axis, args.index, args.to_dir or work / "slices")
        print(out)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return run(args)
    except pipeline.MissingStage as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except pipeline.ShapeMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (UsageError, ConfigError, VolumeError, CheckpointError, FileNotFoundError, FileExistsError,
            PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return 1


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
