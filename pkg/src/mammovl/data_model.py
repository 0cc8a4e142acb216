"""Core domain types and dataset manifest I/O.

A manifest is JSON-lines: an optional header line declaring the attribute
vocabulary, then one study per line::

    {"header": {"attributes": ["mass", "calcification"], "version": 1}}
    {"study_id": "s0", "images": {"CC": "img/s0_cc.png", "MLO": "img/s0_mlo.png"},
     "report": {"IMPRESSION": "...", "FINDINGS": "..."},
     "attributes": {"mass": {"value": 1, "subtype": "obscured", "laterality": "left",
                             "depth": "anterior", "position": "upper"},
                    "calcification": {"value": 0}},
     "boxes": [{"attr": "mass", "x0": 10, "y0": 20, "x1": 30, "y1": 40}],
     "split": "train"}

Several findings of one attribute are written as
``{"value": 1, "findings": [{...}, {...}]}``.  Relative image paths resolve
against the manifest's directory.  CSV (attribute-only datasets) is accepted
with columns ``study_id, split, image_CC, image_MLO`` plus, per attribute,
``<attr>`` (0/1) and optional ``<attr>_subtype``, ``<attr>_laterality``,
``<attr>_depth``, ``<attr>_position``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np
from PIL import Image

from .exceptions import ParseError, ValidationError

VIEWS = ("CC", "MLO")
SECTIONS = ("IMPRESSION", "FINDINGS")
SPLITS = ("train", "val", "test")
SLOTS = ("subtype", "laterality", "depth", "position")
LATERALITIES = ("left", "right")
DEPTHS = ("anterior", "mid", "posterior")
MANIFEST_VERSION = 1


def as_image(pixels) -> np.ndarray:
    """Validate a grayscale image and return it as a float64 array."""
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValidationError(f"image must be a non-empty 2-D grid, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("image contains non-finite values")
    return arr


@dataclass(frozen=True)
class Finding:
    """Metadata of one positive finding; every field is optional."""

    subtype: str | None = None
    laterality: str | None = None
    depth: str | None = None
    position: str | None = None

    def __post_init__(self):
        if self.laterality is not None and self.laterality not in LATERALITIES:
            raise ValidationError(f"laterality must be one of {LATERALITIES}, got {self.laterality!r}")
        if self.depth is not None and self.depth not in DEPTHS:
            raise ValidationError(f"depth must be one of {DEPTHS}, got {self.depth!r}")

    def slots(self) -> dict[str, str]:
        return {k: getattr(self, k) for k in SLOTS if getattr(self, k) is not None}

    def to_record(self) -> dict:
        return self.slots()

    @classmethod
    def from_record(cls, rec: Mapping) -> "Finding":
        unknown = set(rec) - set(SLOTS)
        if unknown:
            raise ParseError(f"unknown finding fields {sorted(unknown)}")
        return cls(**{k: (None if rec.get(k) in (None, "") else str(rec[k])) for k in SLOTS})


@dataclass(frozen=True)
class AttributeVector:
    """Multi-hot labels over a fixed vocabulary plus per-finding metadata.

    ``findings`` maps an attribute name to the metadata of each of its
    findings and may only name attributes whose value is 1.
    """

    vocabulary: tuple[str, ...]
    values: tuple[int, ...]
    findings: Mapping[str, tuple[Finding, ...]] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "vocabulary", tuple(self.vocabulary))
        object.__setattr__(self, "values", tuple(int(v) for v in self.values))
        object.__setattr__(self, "findings", {k: tuple(v) for k, v in self.findings.items()})
        if len(self.vocabulary) != len(self.values):
            raise ValidationError("attribute values must match the vocabulary length")
        if len(set(self.vocabulary)) != len(self.vocabulary):
            raise ValidationError("attribute vocabulary has duplicates")
        if any(v not in (0, 1) for v in self.values):
            raise ValidationError(f"attribute values must be 0/1, got {self.values}")
        for name, fs in self.findings.items():
            if name not in self.vocabulary:
                raise ValidationError(f"unknown attribute {name!r}")
            if fs and self.value(name) != 1:
                raise ValidationError(f"metadata given for negative attribute {name!r}")

    def value(self, name: str) -> int:
        try:
            return self.values[self.vocabulary.index(name)]
        except ValueError:
            raise ValidationError(f"unknown attribute {name!r}") from None

    def positives(self) -> list[str]:
        return [k for k, v in zip(self.vocabulary, self.values) if v]

    def findings_of(self, name: str) -> tuple[Finding, ...]:
        return self.findings.get(name, ())

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.int64)

    def to_record(self) -> dict:
        out = {}
        for name, v in zip(self.vocabulary, self.values):
            fs = self.findings_of(name)
            if len(fs) == 1 and fs[0].to_record():
                out[name] = {"value": v, **fs[0].to_record()}
            elif fs:
                out[name] = {"value": v, "findings": [f.to_record() for f in fs]}
            else:
                out[name] = {"value": v}
        return out

    @classmethod
    def from_record(cls, rec: Mapping, vocabulary) -> "AttributeVector":
        vocabulary = tuple(vocabulary)
        unknown = [k for k in rec if k not in vocabulary]
        if unknown:
            raise ValidationError(f"attributes {unknown} not in vocabulary {list(vocabulary)}")
        values, findings = [], {}
        for name in vocabulary:
            item = rec.get(name, {"value": 0})
            if isinstance(item, (int, bool)):
                item = {"value": int(item)}
            if not isinstance(item, Mapping) or "value" not in item:
                raise ParseError(f"attribute {name!r} needs a 'value' field")
            values.append(int(item["value"]))
            meta = {k: v for k, v in item.items() if k not in ("value", "findings")}
            fs = [Finding.from_record(f) for f in item.get("findings", [])]
            if meta:
                fs.insert(0, Finding.from_record(meta))
            if fs:
                findings[name] = tuple(fs)
        return cls(vocabulary, tuple(values), findings)


@dataclass(frozen=True)
class GroundTruthBox:
    attr: str
    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValidationError(f"degenerate box {self}")

    def to_record(self) -> dict:
        return {"attr": self.attr, "x0": self.x0, "y0": self.y0, "x1": self.x1, "y1": self.y1}


@dataclass(frozen=True)
class Study:
    """One patient exam with images keyed by view and report keyed by section.

    Missing views or sections are absent keys, never empty values.
    """

    study_id: str
    images: Mapping[str, np.ndarray] = field(default_factory=dict)
    report: Mapping[str, str] = field(default_factory=dict)
    attributes: AttributeVector | None = None
    boxes: tuple[GroundTruthBox, ...] = ()

    def __post_init__(self):
        images = {v: as_image(img) for v, img in self.images.items()}
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "report", dict(self.report or {}))
        object.__setattr__(self, "boxes", tuple(self.boxes))
        _check_study_fields(self.study_id, self.images, self.report, self.attributes)
        if not images and self.attributes is None:
            raise ValidationError(f"study {self.study_id!r}: needs at least one view or attributes")


def _check_study_fields(study_id, images, report, attributes):
    for view in images:
        if view not in VIEWS:
            raise ValidationError(f"study {study_id!r}: unknown view {view!r}")
    for section, text in report.items():
        if section not in SECTIONS:
            raise ValidationError(f"study {study_id!r}: unknown report section {section!r}")
        if not isinstance(text, str) or not text.strip():
            raise ValidationError(f"study {study_id!r}: report section {section} is empty")


@dataclass(frozen=True)
class ManifestEntry:
    study_id: str
    image_paths: Mapping[str, str]
    report: Mapping[str, str]
    attributes: AttributeVector | None
    boxes: tuple[GroundTruthBox, ...] = ()
    split: str = "train"

    def to_record(self) -> dict:
        rec = {"study_id": self.study_id}
        if self.image_paths:
            rec["images"] = dict(self.image_paths)
        if self.report:
            rec["report"] = dict(self.report)
        if self.attributes is not None:
            rec["attributes"] = self.attributes.to_record()
        if self.boxes:
            rec["boxes"] = [b.to_record() for b in self.boxes]
        rec["split"] = self.split
        return rec


@dataclass(frozen=True)
class DatasetManifest:
    """Immutable list of study records with their split assignment."""

    entries: tuple[ManifestEntry, ...] = ()
    vocabulary: tuple[str, ...] = ()
    root: Path | None = None

    def __len__(self):
        return len(self.entries)

    def __iter__(self) -> Iterator[Study]:
        for entry in self.entries:
            yield self.load_study(entry)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def load_study(self, entry: ManifestEntry) -> Study:
        images = {view: load_image(self.resolve(p)) for view, p in entry.image_paths.items()}
        return Study(entry.study_id, images, entry.report, entry.attributes, entry.boxes)

    def split(self, name: str) -> "DatasetManifest":
        return DatasetManifest(tuple(e for e in self.entries if e.split == name), self.vocabulary, self.root)

    def by_id(self, study_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.study_id == study_id:
                return e
        raise KeyError(study_id)


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64)


def save_image(pixels: np.ndarray, path) -> None:
    arr = np.clip(np.rint(pixels), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def _parse_entry(rec: Mapping, vocabulary, lineno) -> ManifestEntry:
    known = {"study_id", "images", "report", "attributes", "boxes", "split"}
    if not isinstance(rec, Mapping) or "study_id" not in rec:
        raise ParseError(f"line {lineno}: record needs a study_id")
    extra = set(rec) - known
    if extra:
        raise ParseError(f"line {lineno}: unknown fields {sorted(extra)}")
    sid = str(rec["study_id"])
    try:
        images = {str(k): str(v) for k, v in (rec.get("images") or {}).items()}
        report = {str(k): v for k, v in (rec.get("report") or {}).items()}
        attrs = rec.get("attributes")
        attributes = AttributeVector.from_record(attrs, vocabulary) if attrs is not None else None
        boxes = tuple(
            GroundTruthBox(str(b["attr"]), int(b["x0"]), int(b["y0"]), int(b["x1"]), int(b["y1"]))
            for b in rec.get("boxes") or []
        )
    except (KeyError, TypeError, AttributeError) as exc:
        raise ParseError(f"line {lineno} (study {sid!r}): {exc}") from exc
    except ValidationError as exc:
        raise ValidationError(f"study {sid!r}: {exc}") from exc
    split = rec.get("split", "train")
    if split not in SPLITS:
        raise ValidationError(f"study {sid!r}: unknown split {split!r}")
    for b in boxes:
        if b.attr not in vocabulary:
            raise ValidationError(f"study {sid!r}: box for unknown attribute {b.attr!r}")
    return ManifestEntry(sid, images, report, attributes, boxes, split)


def _validate_entry(entry: ManifestEntry, root: Path | None) -> None:
    sid = entry.study_id
    _check_study_fields(sid, entry.image_paths, entry.report, entry.attributes)
    if not entry.image_paths:
        # rows without any mammogram carry nothing to train or evaluate on
        what = "images and attributes" if entry.attributes is None else "images"
        raise ValidationError(f"study {sid!r}: missing {what}")
    if not entry.report and entry.attributes is None:
        raise ValidationError(f"study {sid!r}: needs a report or attributes")
    for view, p in entry.image_paths.items():
        path = Path(p) if Path(p).is_absolute() or root is None else root / p
        if not path.exists():
            raise FileNotFoundError(f"study {sid!r}: {view} image not found at {path}")


def _build(entries, vocabulary, root) -> DatasetManifest:
    seen = set()
    for e in entries:
        if e.study_id in seen:
            raise ValidationError(f"duplicate study_id {e.study_id!r}")
        seen.add(e.study_id)
        _validate_entry(e, root)
    return DatasetManifest(tuple(entries), tuple(vocabulary), root)


def load_manifest(path) -> DatasetManifest:
    """Load and validate a JSON-lines or CSV manifest."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if path.suffix.lower() == ".csv":
        return _load_csv(path)
    raw = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                raw.append((lineno, json.loads(line)))
            except json.JSONDecodeError as exc:
                raise ParseError(f"line {lineno}: {exc}") from exc
    vocabulary = None
    if raw and isinstance(raw[0][1], Mapping) and "header" in raw[0][1]:
        vocabulary = list(raw.pop(0)[1]["header"].get("attributes", []))
    if vocabulary is None:
        # no header: vocabulary in first-appearance order
        vocabulary = []
        for _, rec in raw:
            for k in (rec.get("attributes") or {}) if isinstance(rec, Mapping) else ():
                if k not in vocabulary:
                    vocabulary.append(k)
    entries = [_parse_entry(rec, vocabulary, lineno) for lineno, rec in raw]
    return _build(entries, vocabulary, path.parent)


def _load_csv(path: Path) -> DatasetManifest:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        base = {"study_id", "split", "image_CC", "image_MLO"}
        vocabulary = [c for c in cols if c not in base and not any(c.endswith("_" + s) for s in SLOTS)]
        entries = []
        for lineno, row in enumerate(reader, 2):
            if not row.get("study_id"):
                raise ParseError(f"line {lineno}: missing study_id")
            images = {v: row[f"image_{v}"] for v in VIEWS if row.get(f"image_{v}")}
            attrs = {}
            for name in vocabulary:
                try:
                    item = {"value": int(row[name] or 0)}
                except ValueError as exc:
                    raise ParseError(f"line {lineno}: bad value for {name!r}") from exc
                for slot in SLOTS:
                    if row.get(f"{name}_{slot}"):
                        item[slot] = row[f"{name}_{slot}"]
                attrs[name] = item
            rec = {"study_id": row["study_id"], "images": images, "attributes": attrs,
                   "split": row.get("split") or "train"}
            entries.append(_parse_entry(rec, vocabulary, lineno))
    return _build(entries, vocabulary, path.parent)


def dump_manifest(manifest: DatasetManifest, path) -> None:
    """Write ``manifest`` as JSON-lines, header first."""
    with open(path, "w") as fh:
        header = {"header": {"attributes": list(manifest.vocabulary), "version": MANIFEST_VERSION}}
        fh.write(json.dumps(header) + "\n")
        for e in manifest.entries:
            fh.write(json.dumps(e.to_record()) + "\n")


def split_counts(manifest: DatasetManifest) -> dict[str, int]:
    counts = dict.fromkeys(SPLITS, 0)
    for e in manifest.entries:
        counts[e.split] += 1
    return counts
