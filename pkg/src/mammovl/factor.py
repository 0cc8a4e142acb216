"""Per-attribute channel mappers over a frozen image encoder, their contrastive
attribution loss, and text-aligned heatmaps for weak localization.

Shapes: feature maps are ``(B, C, H, W)``; a mapper sends every channel's
flattened ``H*W`` grid to a ``d``-vector, so one image yields a ``C x d``
matrix whose product with the attribute embedding ``t_k`` gives one
similarity per channel.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from PIL import Image
from scipy import ndimage
from torch import nn

from .checkpoint import load_archive, save_archive
from .data_model import DatasetManifest, Study
from .encoders import DualEncoder
from .evaluation import BBox, DetectionSet, detection_rate, heatmap_to_boxes, map_score, random_boxes_like
from .exceptions import EmptyNegativeSet, ShapeMismatch, ValidationError
from .preprocessing import AugmentationConfig, preprocess_image, resize
from .reports import PromptBank, positive_prompts

log = logging.getLogger(__name__)

KERNELS = ("channel", "max")


def hidden_width(hw: int) -> int:
    return max(16, math.ceil(hw / 2))


class ChannelMapper(nn.Module):
    """Linear -> ReLU -> linear, applied to each channel's flattened map."""

    def __init__(self, hw: int, d: int, hidden: int | None = None, zero_init: bool = True):
        super().__init__()
        self.hw, self.d = int(hw), int(d)
        self.hidden = hidden or hidden_width(self.hw)
        self.net = nn.Sequential(nn.Linear(self.hw, self.hidden), nn.ReLU(), nn.Linear(self.hidden, self.d))
        if zero_init:
            nn.init.zeros_(self.net[2].weight)
            nn.init.zeros_(self.net[2].bias)

    def forward(self, fmap: torch.Tensor) -> torch.Tensor:
        """``(..., C, H, W)`` -> ``(..., C, d)``."""
        if fmap.shape[-2] * fmap.shape[-1] != self.hw:
            raise ShapeMismatch(f"mapper expects H*W = {self.hw}, got {tuple(fmap.shape[-2:])}")
        return self.net(fmap.flatten(-2))


def channel_similarity(fmap: torch.Tensor, t_k: torch.Tensor, mapper: ChannelMapper) -> torch.Tensor:
    """``<MLP(fmap_c), t_k>`` for every channel; batched over leading dims."""
    if t_k.ndim != 1 or t_k.shape[0] != mapper.d:
        raise ShapeMismatch(f"t_k must be a {mapper.d}-vector, got shape {tuple(t_k.shape)}")
    return mapper(fmap) @ t_k.to(fmap.dtype)


def _check_tau(tau):
    if not tau > 0:
        raise ValidationError("tau must be positive")


def factor_loss(fmaps: torch.Tensor, labels, t: Mapping[str, torch.Tensor],
                mappers: Mapping[str, ChannelMapper], tau: float = 0.007, kernel: str = "channel") -> torch.Tensor:
    """Contrastive attribution loss summed over positives, channels and attributes.

    ``labels`` is ``(B, K)`` in the column order of ``mappers``.  For every
    image ``i`` carrying attribute ``k`` and every channel ``c`` the positive
    logit ``s_{i,c,k} / tau`` competes with the same channel's logits of all
    batch images lacking ``k``.  ``kernel="max"`` first reduces each image to
    its best channel (one term per image instead of per channel).
    """
    _check_tau(tau)
    if kernel not in KERNELS:
        raise ValidationError(f"kernel must be one of {KERNELS}")
    labels = torch.as_tensor(np.asarray(labels, dtype=bool))
    if labels.ndim != 2 or labels.shape != (fmaps.shape[0], len(mappers)):
        raise ShapeMismatch(f"labels must be (B, K) = ({fmaps.shape[0]}, {len(mappers)})")
    total = fmaps.new_zeros(())
    for j, (attr, mapper) in enumerate(mappers.items()):
        pos = labels[:, j]
        if not bool(pos.any()):
            continue
        if bool(pos.all()):
            raise EmptyNegativeSet(f"batch has no image without {attr!r}")
        s = channel_similarity(fmaps, t[attr], mapper) / tau  # (B, C)
        if kernel == "max":
            s = s.max(dim=1, keepdim=True).values
        neg = torch.logsumexp(s[~pos], dim=0)  # (C,)
        sp = s[pos]
        total = total - (sp - torch.logaddexp(sp, neg)).sum()
    return total


def attribute_heatmap(fmap: torch.Tensor, t_k: torch.Tensor, mapper: ChannelMapper) -> torch.Tensor:
    """Channel-similarity-weighted sum of the channels of one ``(C, H, W)`` map."""
    if fmap.ndim != 3:
        raise ShapeMismatch(f"expected a (C, H, W) feature map, got {tuple(fmap.shape)}")
    return weighted_heatmap(fmap, channel_similarity(fmap, t_k, mapper))


def weighted_heatmap(fmap: torch.Tensor, sim: torch.Tensor) -> torch.Tensor:
    if sim.shape != fmap.shape[:1]:
        raise ShapeMismatch(f"need one weight per channel ({fmap.shape[0]}), got {tuple(sim.shape)}")
    return torch.einsum("c,chw->hw", sim.to(fmap.dtype), fmap)


@torch.no_grad()
def attribute_embeddings(model: DualEncoder, bank: PromptBank, attributes: Sequence[str]) -> dict[str, torch.Tensor]:
    """Normalized mean of the projected positive-prompt embeddings per attribute."""
    out = {}
    for a in attributes:
        z = model.embed_texts(positive_prompts(a, bank)).mean(dim=0)
        out[a] = z / z.norm()
    return out


@dataclass(frozen=True)
class FactorConfig:
    epochs: int = 20
    lr: float = 1e-4
    tau: float = 0.007
    batch_size: int = 16
    seed: int = 0
    kernel: str = "channel"
    hidden: int | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValidationError("batch_size must be >= 2")
        _check_tau(self.tau)
        if self.kernel not in KERNELS:
            raise ValidationError(f"kernel must be one of {KERNELS}")


def balanced_batches(labels: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled batches; a batch where some attribute has no negative gets one appended."""
    labels = np.asarray(labels, dtype=bool)
    order = rng.permutation(len(labels))
    batches = []
    for b in range(0, len(order), batch_size):
        idx = order[b:b + batch_size]
        for j in range(labels.shape[1]):
            col = labels[idx, j]
            if col.any() and col.all():
                pool = np.flatnonzero(~labels[:, j])
                if pool.size == 0:
                    raise EmptyNegativeSet(f"attribute column {j} has no negative example in the dataset")
                idx = np.append(idx, pool[rng.integers(pool.size)])
        batches.append(idx)
    return batches


@dataclass
class FactorModel:
    """Trained mappers plus the cached attribute embeddings they were fitted to."""

    mappers: dict
    embeddings: dict
    tau: float = 0.007
    kernel: str = "channel"
    history: list = field(default_factory=list)

    @property
    def attributes(self) -> list[str]:
        return list(self.mappers)

    def heatmap(self, fmap: torch.Tensor, attribute: str) -> torch.Tensor:
        return attribute_heatmap(fmap, self.embeddings[attribute], self.mappers[attribute])


@torch.no_grad()
def feature_maps(model: DualEncoder, images, batch_size: int = 64) -> torch.Tensor:
    out = [model.image_features(list(images[i:i + batch_size]))[0] for i in range(0, len(images), batch_size)]
    return torch.cat(out)


def _samples(studies: Sequence[Study], attributes):
    images, labels = [], []
    for s in studies:
        for img in s.images.values():
            images.append(img)
            labels.append([s.attributes.value(a) for a in attributes])
    return images, np.asarray(labels, dtype=bool).reshape(len(images), len(attributes))


def train_factor(model: DualEncoder, studies: Sequence[Study] | DatasetManifest, bank: PromptBank,
                 cfg: FactorConfig | None = None, aug: AugmentationConfig | None = None,
                 attributes: Sequence[str] | None = None) -> FactorModel:
    """Fit one mapper per attribute with the encoders frozen.

    Every view of every study is one training image.  Each mapper has its
    own Adam optimizer, so attributes never touch each other's parameters.
    """
    cfg = cfg or FactorConfig()
    if isinstance(studies, DatasetManifest):
        aug = aug or AugmentationConfig()
        studies = [Study(s.study_id, {v: preprocess_image(im, aug)[0] for v, im in s.images.items()},
                         s.report, s.attributes, s.boxes) for s in studies.split("train")]
    studies = [s for s in studies if s.attributes is not None]
    if not studies:
        raise ValidationError("no labelled studies to train on")
    attributes = list(attributes or studies[0].attributes.vocabulary)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    images, labels = _samples(studies, attributes)
    fmaps = feature_maps(model, images)
    t = attribute_embeddings(model, bank, attributes)
    dtype = fmaps.dtype
    torch.manual_seed(cfg.seed)
    hw = fmaps.shape[-2] * fmaps.shape[-1]
    d = next(iter(t.values())).shape[0]
    mappers = {a: ChannelMapper(hw, d, cfg.hidden).to(dtype) for a in attributes}
    active = [j for j, a in enumerate(attributes) if labels[:, j].any()]
    for j, a in enumerate(attributes):
        if j not in active:
            log.warning("attribute %r never occurs; its mapper stays at initialization", a)
    opts = {attributes[j]: torch.optim.Adam(mappers[attributes[j]].parameters(), lr=cfg.lr) for j in active}
    rng = np.random.default_rng(cfg.seed)
    result = FactorModel(mappers, t, cfg.tau, cfg.kernel)
    for epoch in range(cfg.epochs):
        losses = []
        for idx in balanced_batches(labels, cfg.batch_size, rng):
            x, y = fmaps[idx], labels[idx]
            batch_total = 0.0
            for j in active:
                a = attributes[j]
                loss = factor_loss(x, y[:, [j]], t, {a: mappers[a]}, cfg.tau, cfg.kernel)
                if not loss.requires_grad:
                    continue
                opts[a].zero_grad(set_to_none=True)
                loss.backward()
                opts[a].step()
                batch_total += float(loss.detach())
            losses.append(batch_total)
        rec = {"epoch": epoch, "loss": float(np.mean(losses))}
        result.history.append(rec)
        log.info("factor epoch %d loss %.4f", epoch, rec["loss"])
    return result


def dataset_factor_loss(fm: FactorModel, fmaps: torch.Tensor, labels) -> float:
    """Loss over a whole fixed set, for before/after comparisons."""
    labels = np.asarray(labels, dtype=bool)
    with torch.no_grad():
        return float(factor_loss(fmaps, labels, fm.embeddings, fm.mappers, fm.tau, fm.kernel))


def save_mappers(path, fm: FactorModel, extra: dict | None = None) -> Path:
    payload = {
        "tau": fm.tau,
        "kernel": fm.kernel,
        "attributes": fm.attributes,
        "embeddings": fm.embeddings,
        "mappers": {a: {"hw": m.hw, "d": m.d, "hidden": m.hidden, "state": dict(m.state_dict())}
                    for a, m in fm.mappers.items()},
        "history": fm.history,
        **(extra or {}),
    }
    return save_archive(path, "factor", payload)


def load_mappers(path) -> FactorModel:
    doc = load_archive(path, kind="factor")
    mappers = {}
    for a in doc["attributes"]:
        spec = doc["mappers"][a]
        m = ChannelMapper(spec["hw"], spec["d"], spec["hidden"])
        state = spec["state"]
        m.to(next(iter(state.values())).dtype).load_state_dict(state)
        mappers[a] = m
    return FactorModel(mappers, doc["embeddings"], doc["tau"], doc["kernel"], doc.get("history", []))


# --- heatmap export --------------------------------------------------------


def upsample(hm, size: tuple[int, int], geometry: tuple[float, float] | None = None) -> np.ndarray:
    """Bilinear upsampling of a feature-grid heatmap to ``size``.

    With ``geometry = (stride, offset)`` cell ``i`` is placed on pixel
    ``offset + stride * i`` (edges clamp); otherwise the grids are aligned by
    pixel centres as in :func:`resize`.
    """
    hm = np.asarray(hm, dtype=np.float64)
    if geometry is None:
        return resize(hm, size)
    stride, offset = geometry
    rows = np.clip((np.arange(size[0]) - offset) / stride, 0, hm.shape[0] - 1)
    cols = np.clip((np.arange(size[1]) - offset) / stride, 0, hm.shape[1] - 1)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return ndimage.map_coordinates(hm, [rr, cc], order=1)


def save_heatmap_png(hm, path) -> None:
    """Min-max normalize to 0..255 (constant maps become all zero)."""
    hm = np.asarray(hm, dtype=np.float64)
    lo, hi = hm.min(), hm.max()
    scaled = np.zeros_like(hm) if hi - lo <= 0 else (hm - lo) / (hi - lo) * 255.0
    Image.fromarray(np.rint(scaled).astype(np.uint8), mode="L").save(path)


def save_heatmap_npy(hm, path) -> None:
    """Raw float64 grid in standard ``.npy`` format (the header records dtype and shape)."""
    np.save(path, np.asarray(hm, dtype=np.float64), allow_pickle=False)


# --- weak localization -----------------------------------------------------


@dataclass
class LocalizationResult:
    detections: DetectionSet
    map: dict
    detection_rate: dict
    random_rate: dict
    n_gt: dict


@torch.no_grad()
def localize(model: DualEncoder, fm: FactorModel, studies: Sequence[Study], aug: AugmentationConfig,
             quantile: float = 0.95, iou_thresholds: Sequence[float] = (0.25, 0.5),
             conf_threshold: float = 0.05, view: str = "CC", seed: int = 0,
             random_draws: int = 20) -> LocalizationResult:
    """Heatmap boxes vs ground truth for every study, per attribute.

    ``studies`` carry raw (unpreprocessed) images so ground-truth boxes can
    be mapped into the preprocessed frame where heatmaps live.  Heatmaps are
    upsampled bilinearly to the model input size before thresholding.  The
    random baseline re-places every predicted box uniformly in the image and
    is averaged over ``random_draws`` draws.
    """
    det = DetectionSet()
    preds, gts = {a: [] for a in fm.attributes}, {a: [] for a in fm.attributes}
    for s in studies:
        v = view if view in s.images else next(iter(s.images))
        img, info = preprocess_image(s.images[v], aug)
        fmap = model.image_features([img])[0][0]
        for a in fm.attributes:
            gt = [BBox(*info.map_box(b.x0, b.y0, b.x1, b.y1)) for b in s.boxes if b.attr == a]
            hm = upsample(fm.heatmap(fmap, a).numpy(), img.shape, model.image_encoder.feature_geometry())
            boxes = heatmap_to_boxes(hm, quantile)
            det.add(s.study_id, a, boxes, gt)
            if gt:
                preds[a].append(boxes)
                gts[a].append(gt)
    rng = np.random.default_rng(seed)
    rate, rand_rate, n_gt = {}, {}, {}
    for a in fm.attributes:
        n_gt[a] = sum(len(g) for g in gts[a])
        if n_gt[a] == 0:
            continue
        rate[a] = {t: detection_rate(preds[a], gts[a], t) for t in iou_thresholds}
        draws = [[random_boxes_like(p, aug.target_size, rng) for p in preds[a]] for _ in range(random_draws)]
        rand_rate[a] = {t: float(np.mean([detection_rate(r, gts[a], t) for r in draws])) for t in iou_thresholds}
    scores = {a: map_score(_only(det, a), iou_thresholds, conf_threshold) for a in rate}
    return LocalizationResult(det, scores, rate, rand_rate, n_gt)


def _only(det: DetectionSet, attribute: str) -> DetectionSet:
    return DetectionSet({k: v for k, v in det.predictions.items() if k[1] == attribute},
                        {k: v for k, v in det.ground_truth.items() if k[1] == attribute})
