import filecmp

import numpy as np
import pytest

from mammovl.data_model import load_manifest
from mammovl.exceptions import ValidationError
from mammovl.reports import mentions
from mammovl.synthetic import SyntheticSpec, generate, render_study

CLEAN = dict(noise_sigma=0.0, texture_amplitude=0.0)


def _scan_box(mask):
    """Tight half-open box of the True pixels by a plain scan."""
    x0 = y0 = 10**9
    x1 = y1 = -1
    for r in range(mask.shape[0]):
        for c in range(mask.shape[1]):
            if mask[r, c]:
                x0, y0, x1, y1 = min(x0, c), min(y0, r), max(x1, c + 1), max(y1, r + 1)
    return x0, y0, x1, y1


def test_empty(tmp_path):
    m = generate(SyntheticSpec(n_studies=0), tmp_path)
    assert len(m) == 0
    assert len(load_manifest(tmp_path / "manifest.jsonl")) == 0


def test_planted_mass_box_is_tight():
    spec = SyntheticSpec(priors={"mass": 1.0, "calcification": 0.0}, **CLEAN)
    flat = SyntheticSpec(priors={"mass": 1.0, "calcification": 0.0}, mass_contrast=0.0, **CLEAN)
    for seed in range(15):
        st = render_study(spec, np.random.default_rng(seed))
        bare = render_study(flat, np.random.default_rng(seed))
        planted = (st.cc - bare.cc) > 0
        (box,) = st.boxes
        assert box.attr == "mass" and st.attributes.values == (1, 0)
        assert (box.x0, box.y0, box.x1, box.y1) == _scan_box(planted)


def test_boxes_inside_breast():
    spec = SyntheticSpec(priors={"mass": 0.7, "calcification": 0.7}, **CLEAN)
    for seed in range(30):
        st = render_study(spec, np.random.default_rng(seed))
        h, w = spec.image_size
        for b in st.boxes:
            assert 0 <= b.x0 < b.x1 <= w and 0 <= b.y0 < b.y1 <= h
            mask = st.finding_masks[b.attr]
            assert mask.any() and (st.cc[mask] > 0).all()
            assert _scan_box(mask) == (b.x0, b.y0, b.x1, b.y1)
        assert sorted(b.attr for b in st.boxes) == sorted(st.attributes.positives())


def test_double_run_byte_identical(tmp_path):
    spec = SyntheticSpec(n_studies=6, seed=11)
    generate(spec, tmp_path / "a")
    generate(spec, tmp_path / "b")
    names = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert names == sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", [str(n) for n in names], shallow=False)
    assert not mismatch and not errors and len(match) == 6 * 2 + 1


def test_reports_consistent_with_labels(tiny_synthetic):
    manifest, spec = tiny_synthetic
    assert len(manifest) == 40
    for e in manifest.entries:
        for section in ("IMPRESSION", "FINDINGS"):
            for k, v in zip(e.attributes.vocabulary, e.attributes.values):
                assert mentions(e.report[section], k) == bool(v)


def test_split_sizes(tiny_synthetic):
    manifest, _ = tiny_synthetic
    assert len(manifest.split("train")) == 30 and len(manifest.split("test")) == 10
    assert SyntheticSpec(n_studies=10).splits().count("train") == 8


def test_findings_raise_local_intensity():
    spec = SyntheticSpec(**CLEAN)
    for seed in range(10):
        st = render_study(spec, np.random.default_rng(seed))
        for attr, mask in st.finding_masks.items():
            ring = np.zeros_like(mask)
            b = next(x for x in st.boxes if x.attr == attr)
            ring[max(b.y0 - 4, 0):b.y1 + 4, max(b.x0 - 4, 0):b.x1 + 4] = True
            ring &= ~mask & (st.cc > 0)
            if ring.any():
                assert st.cc[mask].mean() > st.cc[ring].mean() + 40


def test_spec_validation():
    with pytest.raises(ValidationError):
        SyntheticSpec(n_studies=-1)
    with pytest.raises(ValidationError):
        SyntheticSpec(image_size=(8, 8))
    with pytest.raises(ValidationError):
        SyntheticSpec(priors={"mass": 1.5})
    with pytest.raises(ValidationError):
        SyntheticSpec(n_studies=5, split_sizes={"train": 3})
