"""Contrastive pretraining loop: batching, AdamW, warmup+cosine schedule, checkpoints."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_archive, save_archive
from .data_model import DatasetManifest, Study
from .encoders import DualEncoder
from .exceptions import ValidationError
from .losses import MODES, RepresentationBatch, mode_weights, mvs_loss
from .pairing import MultiViewExample, build_example
from .preprocessing import AugmentationConfig, TextAugmenter, preprocess_image
from .reports import PromptBank

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    base_lr: float = 5e-5
    weight_decay: float = 1e-4
    warmup_epochs: int = 1
    batch_size: int = 32
    seed: int = 0
    loss_mode: str = "final_paper"
    lambda_image: float = 1.0
    lambda_text: float = 1.0
    text_pair_weight: float = 0.5
    grad_clip: float | None = None
    dtype: str = "float32"
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValidationError("warmup_epochs must satisfy 0 <= warmup_epochs < epochs")
        if self.batch_size < 2:
            raise ValidationError("batch_size must be >= 2 for a contrastive signal")
        if self.loss_mode not in MODES:
            raise ValidationError(f"loss_mode must be one of {MODES}")
        if self.dtype not in ("float32", "float64"):
            raise ValidationError("dtype must be float32 or float64")


def cosine_warmup_lr(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup from 0 to ``base_lr``, then half-cosine decay to 0."""
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def no_decay(name: str, param: torch.Tensor) -> bool:
    """Biases, gains and the log-temperature are excluded from weight decay."""
    return param.ndim < 2


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.AdamW:
    decay, exempt = [], []
    for name, p in model.named_parameters():
        if p.requires_grad:
            (exempt if no_decay(name, p) else decay).append(p)
    return torch.optim.AdamW(
        [{"params": decay, "weight_decay": cfg.weight_decay}, {"params": exempt, "weight_decay": 0.0}],
        lr=cfg.base_lr,
    )


def build_model(spec: dict | None = None, seed: int = 0, dtype: str = "float32") -> DualEncoder:
    torch.manual_seed(seed)
    model = DualEncoder.from_spec(spec)
    return model.to(getattr(torch, dtype))


def _prepared(study: Study, aug: AugmentationConfig) -> Study:
    images = {v: preprocess_image(img, aug)[0] for v, img in study.images.items()}
    return Study(study.study_id, images, study.report, study.attributes, study.boxes)


def prepare_studies(manifest: DatasetManifest, aug: AugmentationConfig, split: str | None = "train",
                    workers: int = 1) -> list[Study]:
    """Load and crop/resize every image once so epochs reuse the arrays.

    ``workers > 1`` loads studies on a thread pool; the order (and so every
    downstream result) is the same as the serial path.
    """
    m = manifest.split(split) if split else manifest
    if workers <= 1:
        return [_prepared(s, aug) for s in m]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(lambda e: _prepared(m.load_study(e), aug), m.entries))


def embed_examples(model: DualEncoder, examples: list[MultiViewExample]) -> RepresentationBatch:
    n = len(examples)
    images = [e.image for e in examples] + [e.image_aug for e in examples]
    z_img = model.embed_images(images)
    z_txt = model.embed_texts([e.text for e in examples] + [e.text_aug for e in examples])
    return RepresentationBatch(z_img[:n], z_img[n:], z_txt[:n], z_txt[n:])


@dataclass
class TrainResult:
    model: DualEncoder
    optimizer: torch.optim.Optimizer
    history: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [h["loss"] for h in self.history]


def train(studies: list[Study] | DatasetManifest, model: DualEncoder, cfg: TrainConfig,
          aug: AugmentationConfig | None = None, bank: PromptBank | None = None,
          translator: TextAugmenter | None = None) -> TrainResult:
    """Run ``epochs * ceil(N / batch_size)`` optimisation steps.

    ``studies`` may be a manifest (its train split is loaded and preprocessed)
    or already-preprocessed studies.  Batches of one study are skipped as they
    carry no contrastive signal.
    """
    aug = aug or AugmentationConfig()
    if isinstance(studies, DatasetManifest):
        studies = prepare_studies(studies, aug)
    if not studies:
        raise ValidationError("training set is empty")
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    weights = mode_weights(cfg.loss_mode, cfg.lambda_image, cfg.lambda_text, cfg.text_pair_weight)
    optimizer = make_optimizer(model, cfg)
    steps_per_epoch = math.ceil(len(studies) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    warmup = cfg.warmup_epochs * steps_per_epoch
    ckpt_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    metrics_fh = None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(ckpt_dir / "metrics.jsonl", "w")
    result = TrainResult(model, optimizer)
    step = 0
    model.train()
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(studies))
            epoch_losses, max_dev = [], 0.0
            for b in range(steps_per_epoch):
                idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                lr = cosine_warmup_lr(step, total, warmup, cfg.base_lr)
                if len(idx) < 2:
                    step += 1
                    continue
                examples = [build_example(studies[i], aug, bank, rng, translator, preprocess=False) for i in idx]
                batch = embed_examples(model, examples)
                dev = max(float((z.detach().norm(dim=1) - 1).abs().max()) for z in batch.sets().values())
                loss = mvs_loss(batch, model.temperature, weights)
                for g in optimizer.param_groups:
                    g["lr"] = lr
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                if cfg.grad_clip:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                optimizer.step()
                model.temperature.clamp_()
                rec = {"epoch": epoch, "step": step, "loss": float(loss.detach()), "tau": model.temperature.tau.item(),
                       "lr": lr, "norm_dev": dev}
                result.history.append(rec)
                if metrics_fh:
                    metrics_fh.write(json.dumps(rec) + "\n")
                epoch_losses.append(rec["loss"])
                max_dev = max(max_dev, dev)
                step += 1
            summary = {"epoch": epoch, "loss": float(np.mean(epoch_losses)) if epoch_losses else float("nan"),
                       "tau": model.temperature.tau.item(), "max_norm_dev": max_dev}
            result.epochs.append(summary)
            log.info("epoch %d loss %.4f tau %.4f", epoch, summary["loss"], summary["tau"])
            if ckpt_dir is not None:
                path = save_checkpoint(ckpt_dir / f"epoch_{epoch:03d}.json", model, optimizer, epoch, cfg)
                result.checkpoints.append(path)
    finally:
        if metrics_fh:
            metrics_fh.close()
    model.eval()
    return result


def save_checkpoint(path, model: DualEncoder, optimizer: torch.optim.Optimizer | None = None,
                    epoch: int | None = None, cfg: TrainConfig | None = None) -> Path:
    payload = {
        "model_spec": model.spec,
        "dtype": str(model.dtype).removeprefix("torch."),
        "model": dict(model.state_dict()),
        "epoch": epoch,
        "train_config": dataclasses.asdict(cfg) if cfg else None,
    }
    if optimizer is not None:
        payload["optimizer"] = optimizer.state_dict()
    return save_archive(path, "pretrain", payload)


def load_checkpoint(path, with_optimizer: bool = False):
    """Rebuild the model (and optionally an AdamW carrying the saved state)."""
    doc = load_archive(path, kind="pretrain")
    model = DualEncoder.from_spec(doc["model_spec"]).to(getattr(torch, doc["dtype"]))
    model.load_state_dict(doc["model"])
    model.eval()
    if not with_optimizer:
        return model
    cfg = TrainConfig(**doc["train_config"]) if doc.get("train_config") else TrainConfig()
    optimizer = make_optimizer(model, cfg)
    if doc.get("optimizer") is not None:
        optimizer.load_state_dict(doc["optimizer"])
        for g in optimizer.param_groups:
            g["betas"] = tuple(g["betas"])  # JSON has no tuples
    return model, optimizer
