"""
Context maps and habitat-aware pasting
======================================

A background is split into dirt and grass by HSV thresholds. Mined patches
are transformed and pasted mostly onto dirt, and the pasted objects come
back as new annotations.
"""

import numpy as np

from rarespot.augment import PlacementPolicy, augment_image
from rarespot.context import DIRT, GRASS, build_context_map
from rarespot.mining import MatchResult, extract_patches, match
from rarespot.synthetic import fake_detections, make_image, terrain

rng = np.random.default_rng(3)

# the context map of an empty background
background = terrain(192, rng)
cmap = build_context_map(background)
print(f"dirt {cmap.fraction(DIRT):.2f}, grass {cmap.fraction(GRASS):.2f}")

# mine hard samples from a labeled image and a noisy detector output
image, gts = make_image(192, rng, 6)
dets = fake_detections(gts, 192, rng, recall=0.6, n_false=2)
result = match(dets, gts)
print(f"TP {len(result.tp)}, FP {len(result.fp)}, FN {len(result.fn)}")
patches = extract_patches(image, result, pad=4, source_image="demo.png")
print("patch origins:", [p.origin for p in patches])

# paste them; FP patches go in as unlabeled distractors
res = augment_image(background, patches, cmap, PlacementPolicy(dirt_fraction=0.9), rng)
for rec in res.placements:
    print(f"  {rec['origin']:8s} -> {rec['label']:5s} at {[round(v) for v in rec['patch_box']]}")
print(f"{len(res.annotations)} new annotations, {len(res.skips)} skipped")

# with nothing to paste the background is untouched
print("empty paste is a no-op:", np.array_equal(augment_image(background, [], cmap).image, background))

# an empty match result yields no patches at all
print("no matches, no patches:", extract_patches(image, MatchResult()) == [])
