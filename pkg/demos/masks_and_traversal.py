"""
Training masks and the centre-outward traversal
===============================================

Shows how the refiner's guidance patch is built from a mask, and in which
order patches of a volume get refined at inference.
"""

import numpy as np

from brainrefine.refiner import make_mask, make_y_prev, plan_traversal, sample_mask_kind
from brainrefine.volume import build_patch_grid

# masks are full (10% of draws) or one of six half-spaces (15% each)
rng = np.random.default_rng(0)
draws = [sample_mask_kind(rng) for _ in range(10_000)]
print({k: draws.count(k) for k in sorted(set(draws))})

# y_prev keeps the known patch outside the mask and noise inside it
p = 8
x_patch = np.linspace(-1, 1, p**3).reshape(p, p, p)
noise = rng.standard_normal((p, p, p))
left = make_mask("left", p)
y_prev = make_y_prev(x_patch, left, noise)
print("left half is noise:", np.array_equal(y_prev[..., :4], noise[..., :4]))
print("right half is the patch:", np.array_equal(y_prev[..., 4:], x_patch[..., 4:]))

# a 32^3 volume with 16^3 patches at stride 8 gives a 3x3x3 grid
grid = build_patch_grid((32, 32, 32), patch_size=16, stride=8)
plan = plan_traversal(grid)
print(f"{len(plan.entries)} entries in {len(plan.shells())} shells, digest {plan.digest()}")
for e in plan.entries[:6]:
    print(f"  shell {e.shell} index {e.index} origin {e.origin}: writes {int(e.mask.sum())} voxels")

# every voxel is written by exactly one entry
counts = np.zeros(grid.volume_shape, int)
for e in plan.entries:
    o = e.origin
    counts[o[0]:o[0] + 16, o[1]:o[1] + 16, o[2]:o[2] + 16] += e.mask
print("write counts:", np.unique(counts))
