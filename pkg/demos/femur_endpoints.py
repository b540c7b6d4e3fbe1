"""
Femur endpoints from a distance map
===================================

A femur model regresses a map that is zero at both ends of the bone. Here
the map is built from a known annotation, corrupted, and the endpoints are
recovered with the post-processing and watershed steps.
"""

import numpy as np

from ageus.core import FemurAnnotation
from ageus.femur import femur_length, locate_endpoints, make_distance_map, postprocess_map

truth = FemurAnnotation((80.3, 40.7), (150.2, 200.9))
dmap = make_distance_map(truth, (256, 256))
print("clean map range", dmap.min(), dmap.max())

rng = np.random.default_rng(0)
noisy = np.clip(dmap + rng.normal(0, 0.04, dmap.shape), 0, 1)
# a few single-pixel dips of the kind a network produces away from the bone
for r, c in rng.integers(20, 236, (5, 2)):
    noisy[r, c] = 0.0

for name, m in (("clean", dmap), ("noisy", noisy)):
    pair = locate_endpoints(postprocess_map(m))
    print(f"{name:>5}: p1={pair.p1} p2={pair.p2} "
          f"FL={femur_length(pair, 0.3):.3f} cm (truth {femur_length(truth, 0.3):.3f} cm)")
