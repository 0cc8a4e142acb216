"""
Attribute heatmaps and weak localization
========================================

Freeze a pretrained image encoder, fit one channel mapper per attribute,
and turn the channel-weighted feature maps into boxes.  Expects the
checkpoint written by ``02_pretrain_and_zero_shot.py``.

Run with ``python3 demos/03_factor_localization.py [pretrain_dir]``.
"""

import sys
from pathlib import Path

import numpy as np
import torch

from mammovl.data_model import load_manifest
from mammovl.evaluation import heatmap_to_boxes, iou, BBox
from mammovl.factor import FactorConfig, localize, save_heatmap_png, train_factor, upsample
from mammovl.preprocessing import AugmentationConfig, preprocess_image
from mammovl.pretraining import load_checkpoint, prepare_studies
from mammovl.reports import load_bank

torch.set_num_threads(1)
src = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/pretrain")
model = load_checkpoint(src / "model.json")
manifest = load_manifest(src / "data" / "manifest.jsonl")
aug = AugmentationConfig(target_size=(128, 80))

fm = train_factor(model, prepare_studies(manifest, aug, "train"), load_bank(),
                  FactorConfig(epochs=20, lr=1e-4, tau=0.007, batch_size=16))
print("factor loss by epoch:", [round(h["loss"], 1) for h in fm.history[::4]])

# one test study: heatmap per attribute, its top region and the truth
study = next(s for s in manifest.split("test") if len(s.boxes) == 2)
img, info = preprocess_image(study.images["CC"], aug)
with torch.no_grad():
    fmap = model.image_features([img])[0][0]
for attr in fm.attributes:
    hm = upsample(fm.heatmap(fmap, attr).detach().numpy(), img.shape, model.image_encoder.feature_geometry())
    save_heatmap_png(hm, src / f"{study.study_id}_{attr}.png")
    boxes = sorted(heatmap_to_boxes(hm), key=lambda b: -b.score)
    gt = next(BBox(*info.map_box(b.x0, b.y0, b.x1, b.y1)) for b in study.boxes if b.attr == attr)
    best = max(boxes, key=lambda b: iou(b, gt))
    print(f"{attr:14s} {len(boxes)} regions, best IoU {iou(best, gt):.2f} (truth {gt.coords()})")

# the whole test split against a random-placement baseline
res = localize(model, fm, list(manifest.split("test")), aug)
for attr in fm.attributes:
    print(f"{attr:14s} detected {res.detection_rate[attr][0.25]:.2f} of boxes at IoU 0.25 "
          f"(random boxes: {res.random_rate[attr][0.25]:.2f}); mAP@0.25 {res.map[attr][0.25]:.3f}")
print("heatmaps written next to", src / "model.json")
