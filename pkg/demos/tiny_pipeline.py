"""
The whole pipeline in a few seconds
===================================

Phantom data, autoencoder, latent DDPM, refiner, reconstruction,
generation, refinement and the metric report, on 16^3 volumes with tiny
networks. The numbers mean nothing at this size; the point is the flow.
For the measured run use ``experiments/cpu32.yaml``.
"""

import sys
import tempfile
from pathlib import Path

from brainrefine import pipeline
from brainrefine.config import load_config
from brainrefine.metrics.report import summary_table

tiny = {
    "data": {"n": 6, "shape": [16, 16, 16]},
    "autoencoder": {"channels": [4, 8, 8], "epochs": 3, "batch": 2},
    "ldm": {"channels": [8, 16], "num_res_blocks": 1, "attention": [False, False],
            "schedule": {"T": 10, "beta_start": 0.015, "beta_end": 0.4}, "epochs": 3, "batch": 2},
    "refiner": {"channels": [4, 8], "attention": [False, False], "patch_size": 8, "stride": 4,
                "schedule": {"T": 6, "beta_start": 0.0015, "beta_end": 0.5}, "epochs": 2, "batch": 4},
    "generate": {"n": 2},
    "metrics": {"lpips": {"n": 20, "patch": 8}, "sharpness": {"n": 20, "patch": 8}, "hog": {"cell": 4},
                "features": {"n_per_volume": 10, "patch": 8, "k": [2, 5]}},
}
cfg = load_config(overrides=tiny)
work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="brainrefine-"))

report = pipeline.run_all(cfg, work)
print(f"work directory: {work}")
print(sorted(p.name for p in (work / "checkpoints").iterdir()))
print(summary_table(report))
