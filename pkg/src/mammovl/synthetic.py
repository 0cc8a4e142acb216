"""Toy mammogram-like studies with planted, labelled findings and known boxes."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data_model import (AttributeVector, DatasetManifest, Finding, GroundTruthBox, ManifestEntry,
                         SPLITS, dump_manifest, save_image)
from .exceptions import ValidationError
from .reports import PromptBank, load_bank, synthesize_report

MASS_SUBTYPES = ("circumscribed", "spiculated", "suspicious", "lobulated")
CALC_SUBTYPES = ("punctate", "pleomorphic", "suspicious", "coarse")


@dataclass(frozen=True)
class SyntheticSpec:
    n_studies: int = 600
    image_size: tuple[int, int] = (128, 80)
    priors: dict = field(default_factory=lambda: {"mass": 0.5, "calcification": 0.5})
    noise_sigma: float = 4.0
    seed: int = 0
    split_sizes: dict | None = None
    tissue_level: float = 100.0
    texture_amplitude: float = 12.0
    mass_contrast: float = 70.0
    mass_radius: tuple[int, int] = (7, 12)
    calc_contrast: float = 110.0
    calc_count: tuple[int, int] = (8, 14)
    calc_dot_size: int = 3

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(s) for s in self.image_size))
        object.__setattr__(self, "mass_radius", tuple(int(s) for s in self.mass_radius))
        if self.n_studies < 0:
            raise ValidationError("n_studies must be >= 0")
        if min(self.image_size) < 16:
            raise ValidationError(f"image_size too small: {self.image_size}")
        for k, p in self.priors.items():
            if not 0.0 <= p <= 1.0:
                raise ValidationError(f"prior for {k!r} must lie in [0, 1]")
        if self.split_sizes is not None:
            if set(self.split_sizes) - set(SPLITS):
                raise ValidationError(f"unknown split in {self.split_sizes}")
            if sum(self.split_sizes.values()) != self.n_studies:
                raise ValidationError("split_sizes must sum to n_studies")

    @property
    def vocabulary(self) -> tuple[str, ...]:
        return tuple(self.priors)

    def splits(self) -> list[str]:
        sizes = self.split_sizes
        if sizes is None:
            n_train = int(round(0.8 * self.n_studies))
            n_val = int(round(0.1 * self.n_studies))
            sizes = {"train": n_train, "val": n_val, "test": self.n_studies - n_train - n_val}
        return [s for s in SPLITS for _ in range(sizes.get(s, 0))]


@dataclass
class RenderedStudy:
    cc: np.ndarray
    mlo: np.ndarray
    attributes: AttributeVector
    boxes: list[GroundTruthBox]
    finding_masks: dict


def _breast(spec: SyntheticSpec, rng):
    h, w = spec.image_size
    side = "left" if rng.random() < 0.5 else "right"
    cy = h / 2 + rng.uniform(-0.05, 0.05) * h
    ry = rng.uniform(0.36, 0.44) * h
    rx = rng.uniform(0.75, 0.92) * w
    cx = 0.0 if side == "left" else w - 1.0
    yy, xx = np.mgrid[0:h, 0:w]
    rho = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
    return side, (cy, cx, ry, rx), rho


def _place(rng, geom, rho_max, image_size):
    cy, cx, ry, rx = geom
    while True:
        t = rng.uniform(-np.pi / 2, np.pi / 2)
        r = np.sqrt(rng.uniform(0.04, 1.0)) * rho_max
        y = cy + r * ry * np.sin(t)
        x = cx + (1 if cx == 0 else -1) * r * rx * np.cos(t)
        if 0 <= y < image_size[0] and 0 <= x < image_size[1]:
            return y, x


def _finding_meta(y, x, geom, side, subtype) -> Finding:
    cy, cx, _, rx = geom
    frac = abs(x - cx) / rx
    depth = "posterior" if frac < 1 / 3 else "mid" if frac < 2 / 3 else "anterior"
    return Finding(subtype=subtype, laterality=side, depth=depth, position="upper" if y < cy else "lower")


def _box(attr: str, mask: np.ndarray) -> GroundTruthBox:
    rows, cols = np.nonzero(mask)
    return GroundTruthBox(attr, int(cols.min()), int(rows.min()), int(cols.max()) + 1, int(rows.max()) + 1)


def render_study(spec: SyntheticSpec, rng: np.random.Generator) -> RenderedStudy:
    """Render one scene twice (CC and MLO differ only in noise)."""
    h, w = spec.image_size
    side, geom, rho = _breast(spec, rng)
    breast = rho <= 1.0
    texture = ndimage.gaussian_filter(rng.normal(size=(h, w)), 3.0)
    texture *= spec.texture_amplitude / (texture.std() + 1e-12)
    falloff = 1.0 - 0.3 * np.clip(rho, 0, 1) ** 4
    scene = np.where(breast, spec.tissue_level * falloff + texture, 0.0)

    yy, xx = np.mgrid[0:h, 0:w]
    values, findings, boxes, masks = [], {}, [], {}
    centers = []
    for attr, prior in spec.priors.items():
        present = bool(rng.random() < prior)
        values.append(int(present))
        if not present:
            continue
        while True:
            y, x = _place(rng, geom, 0.7, spec.image_size)
            if all(np.hypot(y - a, x - b) > 22 for a, b in centers):
                break
        centers.append((y, x))
        if attr == "calcification":
            mask = np.zeros((h, w), dtype=bool)
            d = spec.calc_dot_size
            for _ in range(int(rng.integers(*spec.calc_count))):
                dy, dx = rng.uniform(-6, 6, size=2)
                r, c = int(round(y + dy)), int(round(x + dx))
                mask[max(r - d // 2, 0):r - d // 2 + d, max(c - d // 2, 0):c - d // 2 + d] = True
            mask[int(y), int(x)] = True
            mask &= breast
            contrast, subtypes = spec.calc_contrast, CALC_SUBTYPES
        else:
            ry_m, rx_m = rng.uniform(*spec.mass_radius, size=2)
            mask = (((yy - y) / ry_m) ** 2 + ((xx - x) / rx_m) ** 2 <= 1.0) & breast
            contrast, subtypes = spec.mass_contrast, MASS_SUBTYPES
        scene = scene + contrast * mask
        masks[attr] = mask
        boxes.append(_box(attr, mask))
        subtype = subtypes[int(rng.integers(len(subtypes)))]
        findings[attr] = (_finding_meta(y, x, geom, side, subtype),)

    def view():
        noisy = scene + rng.normal(0, spec.noise_sigma, size=scene.shape)
        return np.clip(np.rint(noisy), 0, 255)

    attrs = AttributeVector(spec.vocabulary, tuple(values), findings)
    return RenderedStudy(view(), view(), attrs, boxes, masks)


def generate(spec: SyntheticSpec, out_dir, bank: PromptBank | None = None) -> DatasetManifest:
    """Write PNG images and ``manifest.jsonl`` under ``out_dir``; return the manifest."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    bank = bank or load_bank()
    splits = spec.splits()
    seeds = np.random.SeedSequence(spec.seed).spawn(spec.n_studies)
    entries = []
    for i, (seq, split) in enumerate(zip(seeds, splits)):
        rng = np.random.default_rng(seq)
        st = render_study(spec, rng)
        sid = f"syn{i:05d}"
        paths = {}
        for view, img in (("CC", st.cc), ("MLO", st.mlo)):
            rel = f"images/{sid}_{view.lower()}.png"
            save_image(img, out_dir / rel)
            paths[view] = rel
        report = {"IMPRESSION": synthesize_report(st.attributes, bank, rng),
                  "FINDINGS": synthesize_report(st.attributes, bank, rng)}
        entries.append(ManifestEntry(sid, paths, report, st.attributes, tuple(st.boxes), split))
    manifest = DatasetManifest(tuple(entries), spec.vocabulary, out_dir)
    dump_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest
