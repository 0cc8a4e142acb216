"""Zero-shot and linear-probe classification; weakly supervised localization metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch
from scipy import ndimage

from .exceptions import DegenerateSplit, NoGroundTruth, SingleClass, ValidationError

log = logging.getLogger(__name__)

DENSITY_PROMPTS = (
    "the breasts being almost entirely fatty",
    "scattered areas of fibroglandular density",
    "the breast tissue is heterogeneously dense",
    "the breasts are extremely dense",
)


def binary_prompts(finding: str) -> tuple[str, str]:
    """``(negative, positive)`` zero-shot prompt pair for a finding."""
    return f"No {finding}", finding


# --- boxes -------------------------------------------------------------------


@dataclass(frozen=True)
class BBox:
    """Half-open pixel box ``[x0, x1) x [y0, y1)`` with optional confidence."""

    x0: int
    y0: int
    x1: int
    y1: int
    score: float | None = None

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValidationError(f"degenerate box {self}")

    @property
    def area(self) -> int:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def coords(self) -> tuple[int, int, int, int]:
        return self.x0, self.y0, self.x1, self.y1


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


def heatmap_to_boxes(hm, quantile: float = 0.95, min_area: int = 1) -> list[BBox]:
    """Boxes around 8-connected regions strictly above the heatmap's quantile.

    Each box is scored by the mean heatmap value inside its region.  Boxes are
    returned in raster order of each region's first pixel.
    """
    hm = np.asarray(hm, dtype=np.float64)
    if hm.ndim != 2 or not np.all(np.isfinite(hm)):
        raise ValidationError("heatmap must be a finite 2-D grid")
    thr = np.quantile(hm, quantile)
    labels, n = ndimage.label(hm > thr, structure=EIGHT_CONNECTED)
    boxes = []
    for k, sl in enumerate(ndimage.find_objects(labels), start=1):
        region = labels[sl] == k
        area = int(region.sum())
        if area < min_area:
            continue
        score = float(hm[sl][region].mean())
        boxes.append(BBox(sl[1].start, sl[0].start, sl[1].stop, sl[0].stop, score))
    return boxes


@dataclass
class DetectionSet:
    """Predicted and ground-truth boxes keyed by ``(image_id, attribute)``."""

    predictions: dict = field(default_factory=dict)
    ground_truth: dict = field(default_factory=dict)

    def add(self, image_id, attribute: str, predictions: Iterable[BBox] = (), ground_truth: Iterable[BBox] = ()):
        preds = list(predictions)
        if any(p.score is None or not np.isfinite(p.score) for p in preds):
            raise ValidationError("predicted boxes need finite scores")
        self.predictions.setdefault((image_id, attribute), []).extend(preds)
        self.ground_truth.setdefault((image_id, attribute), []).extend(ground_truth)

    def attributes(self) -> list[str]:
        seen = []
        for _, a in list(self.predictions) + list(self.ground_truth):
            if a not in seen:
                seen.append(a)
        return seen

    def images(self, attribute: str) -> list:
        return [i for (i, a) in self.ground_truth if a == attribute]


def average_precision(detections: DetectionSet, attribute: str, iou_threshold: float,
                      conf_threshold: float = 0.05) -> float:
    """All-point interpolated AP; greedy matching in descending score order.

    A prediction is matched to the unmatched ground-truth box of the same
    image with the highest IoU, and counts as a true positive iff that IoU
    exceeds ``iou_threshold``.
    """
    gts = {img: boxes for (img, a), boxes in detections.ground_truth.items() if a == attribute}
    n_gt = sum(len(b) for b in gts.values())
    if n_gt == 0:
        raise NoGroundTruth(f"no ground-truth boxes for {attribute!r}")
    preds = [(p.score, img, p) for (img, a), ps in detections.predictions.items() if a == attribute
             for p in ps if p.score >= conf_threshold]
    if not preds:
        return 0.0
    order = np.argsort([-s for s, _, _ in preds], kind="stable")
    matched = {img: np.zeros(len(b), dtype=bool) for img, b in gts.items()}
    tp = np.zeros(len(preds))
    for rank, j in enumerate(order):
        _, img, box = preds[j]
        best, best_k = 0.0, -1
        for k, g in enumerate(gts.get(img, [])):
            if matched[img][k]:
                continue
            v = iou(box, g)
            if v > best:
                best, best_k = v, k
        if best_k >= 0 and best > iou_threshold:
            matched[img][best_k] = True
            tp[rank] = 1.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def map_score(detections: DetectionSet, iou_thresholds: Sequence[float] = (0.25, 0.5),
              conf_threshold: float = 0.05) -> dict[float, float]:
    """mAP over attributes at each IoU threshold; attributes without GT are skipped."""
    attrs = []
    for a in detections.attributes():
        if any(boxes for (img, b), boxes in detections.ground_truth.items() if b == a):
            attrs.append(a)
        else:
            log.warning("attribute %r has no ground-truth boxes; excluded from mAP", a)
    if not attrs:
        raise NoGroundTruth("no attribute has ground-truth boxes")
    return {t: float(np.mean([average_precision(detections, a, t, conf_threshold) for a in attrs]))
            for t in iou_thresholds}


def detection_rate(predictions: Sequence[Sequence[BBox]], ground_truth: Sequence[Sequence[BBox]],
                   iou_threshold: float = 0.25) -> float:
    """Fraction of ground-truth boxes overlapped by some prediction with IoU > threshold."""
    hits = total = 0
    for preds, gts in zip(predictions, ground_truth):
        for g in gts:
            total += 1
            hits += any(iou(p, g) > iou_threshold for p in preds)
    if total == 0:
        raise NoGroundTruth("no ground-truth boxes")
    return hits / total


def random_boxes_like(boxes: Sequence[BBox], shape: tuple[int, int], rng: np.random.Generator) -> list[BBox]:
    """Same-sized boxes placed uniformly at random inside an image of ``shape``."""
    out = []
    for b in boxes:
        w, h = min(b.x1 - b.x0, shape[1]), min(b.y1 - b.y0, shape[0])
        x0 = int(rng.integers(0, shape[1] - w + 1))
        y0 = int(rng.integers(0, shape[0] - h + 1))
        out.append(BBox(x0, y0, x0 + w, y0 + h, b.score))
    return out


# --- classification ------------------------------------------------------------


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) with ties counted one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    pos, neg = scores[labels], np.sort(scores[~labels])
    if pos.size == 0 or neg.size == 0:
        raise SingleClass("AUC needs both positive and negative labels")
    below = np.searchsorted(neg, pos, side="left")
    ties = np.searchsorted(neg, pos, side="right") - below
    return float((below.sum() + 0.5 * ties.sum()) / (pos.size * neg.size))


def _as_tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x, dtype=np.float64))


def prompt_probabilities(img_embeddings, prompt_embeddings, temperature: float = 1.0) -> np.ndarray:
    """Softmax over prompts of cosine similarity; rows are images."""
    z = _as_tensor(img_embeddings)
    t = _as_tensor(prompt_embeddings).to(z.dtype)
    if z.ndim == 1:
        z = z[None]
    logits = z @ t.T / temperature
    return torch.softmax(logits, dim=-1).detach().cpu().numpy()


@torch.no_grad()
def zero_shot_score(img_embedding, prompt_pair: tuple[str, str], text_encoder, head) -> float:
    """Probability of the positive prompt for one normalized image embedding."""
    t = head(text_encoder(list(prompt_pair)))
    return float(prompt_probabilities(img_embedding, t)[0, 1])


@torch.no_grad()
def zero_shot_scores(model, img_embeddings, finding: str) -> np.ndarray:
    t = model.embed_texts(list(binary_prompts(finding)))
    return prompt_probabilities(img_embeddings, t)[:, 1]


@torch.no_grad()
def zero_shot_classify(model, img_embeddings, prompts: Sequence[str] = DENSITY_PROMPTS) -> np.ndarray:
    """Argmax over a multi-class prompt list (density by default)."""
    return prompt_probabilities(img_embeddings, model.embed_texts(list(prompts))).argmax(axis=1)


@dataclass
class ProbeResult:
    classifier: object
    metric: str
    value: float
    n_train: int


def linear_probe(train_x, train_y, test_x, test_y, fraction: float = 1.0, seed: int = 0) -> ProbeResult:
    """Logistic-regression probe on frozen embeddings using ``fraction`` of the train set.

    Reports AUC for binary labels and accuracy otherwise.
    """
    from sklearn.linear_model import LogisticRegression

    train_x, test_x = np.asarray(train_x, dtype=np.float64), np.asarray(test_x, dtype=np.float64)
    train_y, test_y = np.asarray(train_y), np.asarray(test_y)
    if not 0 < fraction <= 1:
        raise ValidationError("fraction must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    n = max(1, int(round(fraction * len(train_y))))
    idx = np.sort(rng.permutation(len(train_y))[:n])
    classes = np.unique(train_y[idx])
    if classes.size < 2:
        raise DegenerateSplit(f"only class {classes.tolist()} present after subsampling {fraction:.0%}")
    clf = LogisticRegression(max_iter=2000)
    clf.fit(train_x[idx], train_y[idx])
    if np.unique(np.concatenate([train_y, test_y])).size == 2:
        value = auc(clf.predict_proba(test_x)[:, 1], test_y == clf.classes_[1])
        return ProbeResult(clf, "auc", value, n)
    return ProbeResult(clf, "accuracy", float(np.mean(clf.predict(test_x) == test_y)), n)


def retrieval_top1(img_embeddings, txt_embeddings, keys: Sequence | None = None) -> float:
    """Image-to-text top-1 accuracy within one batch.

    With ``keys``, retrieving a text whose key equals the query's key also
    counts (captions describing identical findings are interchangeable).
    """
    sims = _as_tensor(img_embeddings) @ _as_tensor(txt_embeddings).T
    pred = sims.argmax(dim=1).tolist()
    hits = [p == i or (keys is not None and keys[p] == keys[i]) for i, p in enumerate(pred)]
    return float(np.mean(hits))
