"""
Synthetic mammogram-like studies
================================

Generate a small dataset with planted masses and calcification clusters,
then look at one study: both views, the report and the ground-truth boxes.

Run with ``python3 demos/01_synthetic_data.py [out_dir]``.
"""

import sys
from pathlib import Path

import numpy as np
from PIL import Image

from mammovl.data_model import load_manifest
from mammovl.preprocessing import AugmentationConfig, preprocess_image
from mammovl.synthetic import SyntheticSpec, generate

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/synthetic")

# 40 studies, 30 for training and 10 held out
spec = SyntheticSpec(n_studies=40, split_sizes={"train": 30, "test": 10}, seed=0)
manifest = generate(spec, out)
print(f"{len(manifest)} studies written to {out}")

# the manifest on disk reads back to the same records
manifest = load_manifest(out / "manifest.jsonl")
study = next(s for s in manifest if len(s.boxes) == 2)
print("study", study.study_id, "labels", dict(zip(study.attributes.vocabulary, study.attributes.values)))
print("IMPRESSION:", study.report["IMPRESSION"])
print("FINDINGS:  ", study.report["FINDINGS"])
for b in study.boxes:
    print(f"  {b.attr:14s} box x[{b.x0}, {b.x1}) y[{b.y0}, {b.y1})")

# crop the breast region and resize; boxes follow the same map
aug = AugmentationConfig(target_size=(128, 80))
img, info = preprocess_image(study.images["CC"], aug)
print("cropped rows/cols", info.bounds, "->", img.shape)
for b in study.boxes:
    print(f"  {b.attr:14s} box in the model frame", info.map_box(b.x0, b.y0, b.x1, b.y1))

# side by side: CC, MLO and the planted regions outlined
overlay = np.stack([study.images["CC"]] * 3, axis=-1).astype(np.uint8)
for b, colour in zip(study.boxes, ([255, 0, 0], [0, 255, 0])):
    overlay[b.y0, b.x0:b.x1] = overlay[b.y1 - 1, b.x0:b.x1] = colour
    overlay[b.y0:b.y1, b.x0] = overlay[b.y0:b.y1, b.x1 - 1] = colour
mlo = np.stack([study.images["MLO"]] * 3, axis=-1).astype(np.uint8)
Image.fromarray(np.concatenate([overlay, mlo], axis=1)).save(out / "study_overview.png")
print("wrote", out / "study_overview.png")
