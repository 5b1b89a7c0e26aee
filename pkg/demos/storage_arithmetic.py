"""Walk through the exemplar storage arithmetic.

Shows how masking stretches a byte budget: encoding an image at masking
ratio r keeps floor(N * (1 - r)) of its N patches, so the same budget holds
1/(1 - r) times as many exemplars as whole images. Prints the byte layout
of a single record and of a multi-class store.
"""

import tempfile
from pathlib import Path

import numpy as np

from bimae.data import synthetic_shapes
from bimae.patches import encode_exemplar, kept_patch_count, sample_mask
from bimae.store import ExemplarStore, inspect_store

rng = np.random.default_rng(7)

# one 224x224 exemplar at the reference geometry
side, patch = 224, 16
n_patches = (side // patch) ** 2
image = rng.random((3, side, side)).astype(np.float32)
plan = sample_mask(n_patches, 0.75, rng)
record = encode_exemplar(image, plan, label=0)
print(f"{side}x{side} image, {patch}x{patch} patches: {n_patches} total")
print(f"masking ratio 0.75 keeps {record.n_kept} patches")
print(f"payload {record.payload_bytes} bytes ({record.payload_bytes / 1024:.2f} KB), "
      f"index {record.index_bytes} bytes, "
      f"serialized record {record.serialized_bytes} bytes")
print()

# the same budget at different masking ratios
side, patch = 32, 4
budget = 10 * 20 * 3 * side * side   # twenty whole 32x32 images per class, ten classes
print(f"budget {budget} bytes (= 20 whole {side}x{side} images/class for 10 classes)")
images, labels = synthetic_shapes(250, image_side=side, seed=1)
last_store = None
for ratio in (0.0, 0.5, 0.75):
    store = ExemplarStore(budget, side, patch, channels=3, seed=0)
    for cls in range(10):
        store.admit_class(cls, images[labels == cls], ratio)
    kept = kept_patch_count((side // patch) ** 2, ratio)
    per_class = store.counts_per_class[0]
    print(f"  r={ratio:4}: {kept:2d}/{(side // patch) ** 2} patches/exemplar, "
          f"{per_class} exemplars/class, {store.n_entries} total, "
          f"{store.used_bytes}/{budget} bytes used")
    last_store = store

print()
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "store.bmst"
    last_store.save(path)
    report = inspect_store(path)
print("inspect report for the r=0.75 store:")
print(f"  valid:      {report['valid']}")
print(f"  entries:    {report['entry_count']}")
print(f"  usage:      {report['used_bytes']}/{report['budget_bytes']} bytes")
print(f"  geometry:   {report['geometry']}")
print(f"  multiplier: {report['multiplier']:.1f}x the exemplars of whole-image storage")
