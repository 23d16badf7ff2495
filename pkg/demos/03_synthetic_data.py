"""Render the synthetic electrical-equipment dataset and inspect it.

Each image contains instances of exactly one of the four classes on a
textured background with distractor clutter; boxes are the exact pixel
extents of the rendered masks. Generation is fully determined by
(seed, split, image index).
"""

import sys
from collections import Counter
from pathlib import Path

from defectdet.synthetic import SyntheticConfig, generate_synthetic_dataset

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("demo-output/dataset")

cfg = SyntheticConfig(image_size=224, train_counts=(3, 3, 3, 3),
                      test_counts=(1, 1, 1, 1), min_object_size=24,
                      max_object_size=80, seed=11)
dataset, manifest = generate_synthetic_dataset(cfg, out)
print(f"wrote {len(dataset.train)} train / {len(dataset.test)} test "
      f"images under {manifest.parent}")

counts = Counter()
for img in dataset.train:
    for obj in img.objects:
        counts[dataset.classes[obj.class_id]] += 1
print("train object counts:", dict(counts))

img = dataset.train[0]
print(f"\n{img.image_id}  ({img.width}x{img.height})")
for obj in img.objects:
    b = obj.box
    print(f"  {dataset.classes[obj.class_id]:>15}  "
          f"({b.x1:.0f}, {b.y1:.0f}, {b.x2:.0f}, {b.y2:.0f})  "
          f"{b.width:.0f}x{b.height:.0f}")

# Wires are constrained to be at least 8x longer than thick.
wires = [o.box for im in dataset.train for o in im.objects if o.class_id == 4]
aspects = [max(b.width / b.height, b.height / b.width) for b in wires]
print(f"\nwire aspect ratios: min {min(aspects):.1f} over {len(aspects)} wires")
print(f"open the PNGs under {manifest.parent / 'images'} to look at them")
