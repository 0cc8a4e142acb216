"""Builds the (image, image_aug, text, text_aug) tuple for one study."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data_model import Study
from .exceptions import Unbuildable, ValidationError
from .preprocessing import AugmentationConfig, TextAugmenter, augment_image, augment_text, preprocess_image
from .reports import PromptBank, synthesize_report


@dataclass(frozen=True)
class MultiViewExample:
    image: np.ndarray
    image_aug: np.ndarray
    text: str
    text_aug: str
    study_id: str

    def __post_init__(self):
        if self.image.shape != self.image_aug.shape:
            raise ValidationError(f"{self.study_id}: image and image_aug shapes differ")
        if min(self.image.size, self.image_aug.size) == 0:
            raise ValidationError(f"{self.study_id}: empty image")
        if not self.text.strip() or not self.text_aug.strip():
            raise ValidationError(f"{self.study_id}: empty text")


def build_example(study: Study, cfg: AugmentationConfig, bank: PromptBank | None,
                  rng: np.random.Generator, translator: TextAugmenter | None = None,
                  preprocess: bool = True) -> MultiViewExample:
    """Route a study's views and report sections into a training tuple.

    CC/MLO and IMPRESSION/FINDINGS are used verbatim when present; a missing
    partner is derived from the element that is present, and attribute-only
    studies take two independent synthesis draws as text and text_aug.
    """
    views = study.images
    if not views:
        raise Unbuildable(f"study {study.study_id!r} has no image")
    has_text = bool(study.report) or study.attributes is not None
    if not has_text:
        raise Unbuildable(f"study {study.study_id!r} has neither report nor attributes")

    def prep(img):
        return preprocess_image(img, cfg)[0] if preprocess else img

    image = prep(views["CC"] if "CC" in views else views["MLO"])
    if "CC" in views and "MLO" in views:
        image_aug = prep(views["MLO"])
    else:
        image_aug = augment_image(image, cfg, rng)

    report = study.report
    if report:
        text = report.get("IMPRESSION", report.get("FINDINGS"))
        if "IMPRESSION" in report and "FINDINGS" in report:
            text_aug = report["FINDINGS"]
        else:
            text_aug = augment_text(text, rng, translator)
    else:
        if bank is None:
            raise Unbuildable(f"study {study.study_id!r} needs a prompt bank for report synthesis")
        text = synthesize_report(study.attributes, bank, rng)
        text_aug = augment_text(synthesize_report(study.attributes, bank, rng), rng)
    return MultiViewExample(image, image_aug, text, text_aug, study.study_id)
