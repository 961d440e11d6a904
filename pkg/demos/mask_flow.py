"""Walk one synthetic scene through the mask pipeline and print what each stage produces."""
import sys

import numpy as np

from multipose.bench import random_scene
from multipose.masks import mask_flow
from multipose.poses import rasterize_all

sharpness = float(sys.argv[1]) if len(sys.argv) > 1 else 1.0
spec = random_scene(np.random.default_rng(3), 2, frames=2)
pose_maps = rasterize_all(spec.poses)
regions, pyr = mask_flow(pose_maps, sharpness)

print(f"caption: {spec.caption}")
print(f"pose maps: characters x frames x channels x h x w = {pose_maps.shape}")
for k, box in enumerate(regions.bboxes[0]):
    print(f"character {k + 1} frame 0 bbox (top, bottom, left, right) = {box}")
print(f"sharpness s = {sharpness}")
for name, levels in (("group_a", pyr.group_a), ("group_b", pyr.group_b), ("group_c", pyr.group_c)):
    print(f"{name}: sizes {[tuple(l.shape[-2:]) for l in levels]}")
for level in pyr.levels:
    dev = np.abs(level.sum(axis=-3) - 1).max()
    print(f"level {tuple(level.shape[-2:])}: max |sum - 1| = {dev:.2e}")
full = pyr.levels[0][0]
inside = (regions.masks[0, 0] > 0) & (regions.masks[0, 1] == 0)
print(f"weight of character 1 inside its own box only: min {full[0][inside].min():.3f}")
print(f"weight of character 1 in the shared background: {full[0][regions.masks[0].sum(0) == 0].mean():.3f}")
