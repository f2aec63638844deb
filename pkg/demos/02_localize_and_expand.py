"""
From activation maps to an expanded support set
===============================================

A briefly trained encoder localises the object in each support image,
the image is cut into a square foreground and a background with a hole,
and new support samples are made by rotating foregrounds and pasting them
onto other backgrounds of the same episode.
"""

import tempfile

import numpy as np
from PIL import Image

from selftaught.config import TrainConfig, preset
from selftaught.data import box_iou, resolve_domain, sample_episode, stack_pixels
from selftaught.trainer import expand_support, train
from selftaught.wsol import localize_batch

cfg = preset("protonet", TrainConfig(image_size=64, width=32, episodes=60, val_every=0, outer_lr=1e-3))
source = resolve_domain("synthA", "train", 64, 20, 0, 16)
target = resolve_domain("synthB", "test", 64, 20, 0, 16)

# a short baseline run is enough for the activations to find the shapes
with tempfile.TemporaryDirectory() as tmp:
    model = train(cfg, tmp, source=source)["trainer"].model

# localisation on unseen classes of the other texture family
images = [im for c in target for im in target[c][:2]]
located = localize_batch(model, stack_pixels(images), cfg.tau)
ious = [box_iou(box.as_box(), im.gt_box) for im, (_, box) in zip(images, located)]
print(f"median IoU on {len(ious)} target images: {np.median(ious):.2f}")

# expand one 5-way 1-shot support set: originals, one self-rotation and
# three exchanges per image
ep = sample_episode(target, 5, 1, 1, rng_seed=3)
expanded, fallbacks = expand_support(model, stack_pixels(ep.support), ep.support_labels,
                                     preset("st", cfg), np.random.default_rng(0))
print(len(expanded), "samples,", fallbacks, "fallback boxes")
for s in expanded.samples[:8]:
    print(f"  class {s.class_label} {s.kind:>8} angle {s.angle:>3} from image {s.source} on {s.background}")

side = cfg.image_size
rows = []
for c in sorted(expanded.by_class):
    rows.append(np.concatenate([expanded.samples[i].pixels for i in expanded.by_class[c]], axis=1))
Image.fromarray((np.concatenate(rows) * 255).astype(np.uint8)).save("expanded_support.png")
print("wrote expanded_support.png (one row per class, original first)")
