"""
The synthetic shapes world
==========================

Every class is a shape; every domain is a background texture family.
The same seed draws the same shapes in every family, so two domains differ
only in their backgrounds.
"""

import numpy as np
from PIL import Image

from selftaught.data import SHAPE_NAMES, SYNTH_SPLITS, generate_synthetic_domain, sample_episode

# 22 named shapes followed by procedural glyphs; the splits never share a class
print(len(SHAPE_NAMES), "classes:", SHAPE_NAMES[:6], "...", SHAPE_NAMES[-2:])
print({k: len(v) for k, v in SYNTH_SPLITS.items()})

# four test classes in two texture families
classes = SYNTH_SPLITS["test"][:4]
blotches = generate_synthetic_domain(0, classes=classes, images_per_class=6, texture_family="A", image_size=64)
stripes = generate_synthetic_domain(0, classes=classes, images_per_class=6, texture_family="B", image_size=64)

rows = []
for c in classes:
    a = [im.pixels for im in blotches[c][:3]]
    b = [im.pixels for im in stripes[c][:3]]
    rows.append(np.concatenate(a + b, axis=1))
grid = np.concatenate(rows, axis=0)
Image.fromarray((grid * 255).astype(np.uint8)).save("synthetic_world.png")
print("wrote synthetic_world.png (left: family A, right: family B)")

# the ground-truth box is shared across families
im_a, im_b = blotches[classes[0]][0], stripes[classes[0]][0]
print("box in A:", im_a.gt_box, " box in B:", im_b.gt_box)

# a 4-way 1-shot episode with 2 queries per class
ep = sample_episode(blotches, 4, 1, 2, rng_seed=7)
print("episode classes:", [SHAPE_NAMES[c] for c in ep.class_ids])
print("query labels:", ep.query_labels)
