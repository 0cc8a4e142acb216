"""Breast-ROI cropping, resizing and the image/text augmentations."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np
from scipy import ndimage

from .data_model import as_image
from .exceptions import DegenerateImage, ValidationError


class TextAugmenter(Protocol):
    """Anything mapping a report string to an augmented string (e.g. back-translation)."""

    def __call__(self, text: str) -> str: ...


@dataclass(frozen=True)
class AugmentationConfig:
    rotation_max_deg: float = 20.0
    translation_min_frac: float = 0.001
    translation_max_frac: float = 0.1
    scale_range: tuple[float, float] = (0.8, 1.2)
    shear_max_deg: float = 20.0
    elastic_alpha: float = 10.0
    elastic_sigma: float = 5.0
    target_size: tuple[int, int] = (1520, 912)
    crop_threshold: float = 40.0
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "scale_range", tuple(float(s) for s in self.scale_range))
        object.__setattr__(self, "target_size", tuple(int(s) for s in self.target_size))
        lo, hi = self.scale_range
        if lo > hi or lo <= 0:
            raise ValidationError(f"scale_range must satisfy 0 < lo <= hi, got {self.scale_range}")
        mags = (self.rotation_max_deg, self.translation_min_frac, self.translation_max_frac,
                self.shear_max_deg, self.elastic_alpha, self.elastic_sigma, self.crop_threshold)
        if min(mags) < 0:
            raise ValidationError("augmentation magnitudes must be >= 0")
        if self.translation_min_frac > self.translation_max_frac:
            raise ValidationError("translation_min_frac exceeds translation_max_frac")
        if len(self.target_size) != 2 or min(self.target_size) < 1:
            raise ValidationError(f"target_size must be two positive ints, got {self.target_size}")

    @classmethod
    def identity(cls, **overrides) -> "AugmentationConfig":
        """Config whose augmentations are all no-ops."""
        base = dict(rotation_max_deg=0.0, translation_min_frac=0.0, translation_max_frac=0.0,
                    scale_range=(1.0, 1.0), shear_max_deg=0.0, elastic_alpha=0.0)
        base.update(overrides)
        return cls(**base)


# --- ROI crop and resize ---------------------------------------------------


def _constant(lines: np.ndarray) -> np.ndarray:
    return lines.max(axis=1) == lines.min(axis=1)


def _trim(flags: np.ndarray) -> tuple[int, int]:
    keep = np.flatnonzero(~flags)
    if keep.size == 0:
        return 0, 0
    return int(keep[0]), int(keep[-1]) + 1


def roi_bounds(img, threshold: float = 40.0) -> tuple[int, int, int, int]:
    """Half-open ``(row0, row1, col0, col1)`` of the breast region.

    Leading and trailing bands of constant rows/columns are stripped until
    none remain, so the crop is a fixed point of itself.
    """
    arr = as_image(img)
    arr = np.where(arr < threshold, 0.0, arr)
    r0, r1, c0, c1 = 0, arr.shape[0], 0, arr.shape[1]
    while True:
        sub = arr[r0:r1, c0:c1]
        a, b = _trim(_constant(sub))
        c, d = _trim(_constant(sub.T))
        if a == b or c == d:
            raise DegenerateImage("image is entirely background after thresholding")
        if (a, b, c, d) == (0, sub.shape[0], 0, sub.shape[1]):
            return r0, r1, c0, c1
        r0, r1, c0, c1 = r0 + a, r0 + b, c0 + c, c0 + d


def crop_breast_roi(img, threshold: float = 40.0) -> np.ndarray:
    """Zero intensities below ``threshold`` and strip background bands."""
    arr = as_image(img)
    r0, r1, c0, c1 = roi_bounds(arr, threshold)
    return np.where(arr < threshold, 0.0, arr)[r0:r1, c0:c1].copy()


def _axis_weights(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize(img, target: tuple[int, int]) -> np.ndarray:
    """Bilinear resize with pixel-center alignment (edges clamped)."""
    arr = as_image(img)
    h, w = int(target[0]), int(target[1])
    if h < 1 or w < 1:
        raise ValidationError(f"target must be positive, got {target}")
    if (h, w) == arr.shape:
        return arr.copy()
    r0, r1, wr = _axis_weights(arr.shape[0], h)
    c0, c1, wc = _axis_weights(arr.shape[1], w)
    rows = arr[r0] * (1 - wr)[:, None] + arr[r1] * wr[:, None]
    return rows[:, c0] * (1 - wc)[None, :] + rows[:, c1] * wc[None, :]


@dataclass(frozen=True)
class CropInfo:
    """Geometry of a crop+resize, used to carry boxes into preprocessed space."""

    bounds: tuple[int, int, int, int]
    target: tuple[int, int]

    def map_box(self, x0, y0, x1, y1) -> tuple[int, int, int, int]:
        r0, r1, c0, c1 = self.bounds
        sy = self.target[0] / (r1 - r0)
        sx = self.target[1] / (c1 - c0)
        nx0 = int(np.clip(math.floor((x0 - c0) * sx), 0, self.target[1] - 1))
        ny0 = int(np.clip(math.floor((y0 - r0) * sy), 0, self.target[0] - 1))
        nx1 = int(np.clip(math.ceil((x1 - c0) * sx), nx0 + 1, self.target[1]))
        ny1 = int(np.clip(math.ceil((y1 - r0) * sy), ny0 + 1, self.target[0]))
        return nx0, ny0, nx1, ny1


def preprocess_image(img, cfg: AugmentationConfig) -> tuple[np.ndarray, CropInfo]:
    """ROI crop followed by resize to ``cfg.target_size``."""
    arr = as_image(img)
    bounds = roi_bounds(arr, cfg.crop_threshold)
    cropped = crop_breast_roi(arr, cfg.crop_threshold)
    return resize(cropped, cfg.target_size), CropInfo(bounds, cfg.target_size)


# --- image augmentation ----------------------------------------------------


@dataclass(frozen=True)
class AffineParams:
    angle_deg: float = 0.0
    shear_deg: float = 0.0
    scale: float = 1.0
    shift: tuple[float, float] = (0.0, 0.0)  # (rows, cols) in pixels


def sample_affine(shape, cfg: AugmentationConfig, rng: np.random.Generator) -> AffineParams:
    angle = rng.uniform(-cfg.rotation_max_deg, cfg.rotation_max_deg)
    shear = rng.uniform(-cfg.shear_max_deg, cfg.shear_max_deg)
    scale = rng.uniform(*cfg.scale_range)
    mags = rng.uniform(cfg.translation_min_frac, cfg.translation_max_frac, size=2)
    signs = rng.choice([-1.0, 1.0], size=2)
    shift = tuple(float(s * m * n) for s, m, n in zip(signs, mags, shape))
    return AffineParams(float(angle), float(shear), float(scale), shift)


def affine_matrix(p: AffineParams) -> np.ndarray:
    """Forward 2x2 map in (row, col) coordinates: rotation @ shear * scale."""
    t = math.radians(p.angle_deg)
    rot = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    shear = np.array([[1.0, 0.0], [math.tan(math.radians(p.shear_deg)), 1.0]])
    return rot @ shear * p.scale


def apply_affine(img, p: AffineParams) -> np.ndarray:
    """Warp about the image center; uncovered pixels become 0."""
    arr = as_image(img)
    center = (np.array(arr.shape, dtype=float) - 1) / 2
    inv = np.linalg.inv(affine_matrix(p))
    rows, cols = np.indices(arr.shape, dtype=float)
    out = np.stack([rows.ravel(), cols.ravel()]) - center[:, None] - np.asarray(p.shift)[:, None]
    src = inv @ out + center[:, None]
    return ndimage.map_coordinates(arr, src, order=1, mode="grid-constant", cval=0.0).reshape(arr.shape)


def elastic_field(shape, alpha: float, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Gaussian-smoothed random displacement field, shape ``(2, H, W)``."""
    noise = rng.uniform(-1, 1, size=(2, *shape))
    if alpha == 0:
        return np.zeros_like(noise)
    return np.stack([ndimage.gaussian_filter(n, sigma, mode="constant") * alpha for n in noise])


def apply_elastic(img, field: np.ndarray) -> np.ndarray:
    arr = as_image(img)
    if not field.any():
        return arr.copy()
    coords = np.indices(arr.shape, dtype=float) + field
    return ndimage.map_coordinates(arr, coords, order=1, mode="grid-constant", cval=0.0)


def augment_image(img, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    """Random affine then elastic deformation; shape is preserved."""
    arr = as_image(img)
    params = sample_affine(arr.shape, cfg, rng)
    field = elastic_field(arr.shape, cfg.elastic_alpha, cfg.elastic_sigma, rng)
    return apply_elastic(apply_affine(arr, params), field)


# --- text augmentation -----------------------------------------------------

_SENTENCE = re.compile(r"[^.]*\.|[^.]+$")


def split_sentences(text: str) -> list[str]:
    return [s.strip() for s in _SENTENCE.findall(text) if s.strip()]


def augment_text(text: str, rng: np.random.Generator,
                 translator: TextAugmenter | Callable[[str], str] | None = None) -> str:
    """Sentence swap, or ``translator(text)`` when one is supplied."""
    if not text or not text.strip():
        raise ValidationError("cannot augment empty text")
    if translator is not None:
        return translator(text)
    sentences = split_sentences(text)
    if len(sentences) < 2:
        return text
    order = rng.permutation(len(sentences))
    return " ".join(sentences[i] for i in order)
