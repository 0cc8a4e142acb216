"""
Contrastive pretraining and zero-shot classification
====================================================

Pretrain the toy dual encoder on synthetic studies with the multi-view
objective, then score held-out images against "No mass" / "mass" prompts
and measure image-to-text retrieval.  Takes about half a minute on one core.

Run with ``python3 demos/02_pretrain_and_zero_shot.py [out_dir]``.
"""

import sys
from pathlib import Path

import numpy as np
import torch

from mammovl.evaluation import auc, linear_probe, retrieval_top1, zero_shot_scores
from mammovl.preprocessing import AugmentationConfig
from mammovl.pretraining import TrainConfig, build_model, prepare_studies, save_checkpoint, train
from mammovl.synthetic import SyntheticSpec, generate

torch.set_num_threads(1)
out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/pretrain")

spec = SyntheticSpec(n_studies=600, split_sizes={"train": 500, "test": 100}, seed=0)
manifest = generate(spec, out / "data")
aug = AugmentationConfig(target_size=spec.image_size)
train_set = prepare_studies(manifest, aug, "train")
test_set = prepare_studies(manifest, aug, "test")

# CC/MLO and IMPRESSION/FINDINGS are the natural augmented pairs
model = build_model(seed=0)
cfg = TrainConfig(epochs=10, warmup_epochs=1, base_lr=1e-2, batch_size=16, seed=0)
result = train(train_set, model, cfg, aug)
for e in result.epochs:
    print(f"epoch {e['epoch']}: loss {e['loss']:.3f}  tau {e['tau']:.4f}")
save_checkpoint(out / "model.json", model, result.optimizer, cfg.epochs - 1, cfg)

with torch.no_grad():
    z_img = model.embed_images([s.images["CC"] for s in test_set])
    z_txt = model.embed_texts([s.report["IMPRESSION"] for s in test_set])

# zero-shot: softmax over the two prompt similarities
for finding in ("mass", "calcification"):
    labels = [s.attributes.value(finding) for s in test_set]
    print(f"zero-shot AUC {finding}: {auc(zero_shot_scores(model, z_img, finding), labels):.3f}")

# retrieval within batches of 16; captions with the same findings are interchangeable
keys = [s.attributes.values for s in test_set]
acc = [retrieval_top1(z_img[i:i + 16], z_txt[i:i + 16], keys[i:i + 16]) for i in range(0, 96, 16)]
exact = [retrieval_top1(z_img[i:i + 16], z_txt[i:i + 16]) for i in range(0, 96, 16)]
print(f"retrieval top-1: {np.mean(acc):.3f} (same findings), {np.mean(exact):.3f} (same study)")

# linear probe on frozen image embeddings, with 10% of the labels
with torch.no_grad():
    z_train = model.embed_images([s.images["CC"] for s in train_set]).numpy()
for finding in ("mass", "calcification"):
    res = linear_probe(z_train, [s.attributes.value(finding) for s in train_set], z_img.numpy(),
                       [s.attributes.value(finding) for s in test_set], fraction=0.1)
    print(f"linear probe {finding} ({res.n_train} labels): AUC {res.value:.3f}")
