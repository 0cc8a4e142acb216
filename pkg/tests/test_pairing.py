import itertools

import numpy as np
import pytest

from mammovl.data_model import AttributeVector, Finding, Study
from mammovl.exceptions import Unbuildable, ValidationError
from mammovl.pairing import MultiViewExample, build_example
from mammovl.preprocessing import AugmentationConfig, augment_image, augment_text
from mammovl.reports import load_bank, synthesize_report

CFG = AugmentationConfig(target_size=(16, 12))
BANK = load_bank()
ATTRS = AttributeVector(("mass", "calcification"), (0, 0))
CC = 50 + np.add.outer(np.arange(16.0) * 5, np.arange(12.0) * 3)
MLO = CC[::-1, ::-1].copy() * 0.9
IMPRESSION = "Benign appearing tissue. Routine follow up."
FINDINGS = "Scattered fibroglandular density. No focal lesion."


def _expected(cc, mlo, imp, fnd, seed):
    """Replays the routing rules with an identically seeded generator."""
    rng = np.random.default_rng(seed)
    image = CC if cc else MLO
    image_aug = MLO if cc and mlo else augment_image(image, CFG, rng)
    if imp or fnd:
        text = IMPRESSION if imp else FINDINGS
        text_aug = FINDINGS if imp and fnd else augment_text(text, rng)
    else:
        text = synthesize_report(ATTRS, BANK, rng)
        text_aug = augment_text(synthesize_report(ATTRS, BANK, rng), rng)
    return image, image_aug, text, text_aug


@pytest.mark.parametrize("cc,mlo,imp,fnd", list(itertools.product([0, 1], repeat=4)))
def test_decision_table(cc, mlo, imp, fnd):
    images = {**({"CC": CC} if cc else {}), **({"MLO": MLO} if mlo else {})}
    report = {**({"IMPRESSION": IMPRESSION} if imp else {}), **({"FINDINGS": FINDINGS} if fnd else {})}
    study = Study("s", images, report, ATTRS)
    if not images:
        with pytest.raises(Unbuildable):
            build_example(study, CFG, BANK, np.random.default_rng(0), preprocess=False)
        return
    ex = build_example(study, CFG, BANK, np.random.default_rng(7), preprocess=False)
    image, image_aug, text, text_aug = _expected(cc, mlo, imp, fnd, 7)
    np.testing.assert_array_equal(ex.image, image)
    np.testing.assert_array_equal(ex.image_aug, image_aug)
    assert (ex.text, ex.text_aug) == (text, text_aug)
    assert ex.image.size and ex.text.strip() and ex.text_aug.strip()
    assert ex.image.shape == ex.image_aug.shape


def test_full_study_is_verbatim():
    study = Study("s", {"CC": CC, "MLO": MLO}, {"IMPRESSION": IMPRESSION, "FINDINGS": FINDINGS})
    ex = build_example(study, CFG, None, np.random.default_rng(0), preprocess=False)
    assert ex.image is study.images["CC"] and ex.image_aug is study.images["MLO"]
    assert (ex.text, ex.text_aug) == (IMPRESSION, FINDINGS)


def test_preprocessing_applied():
    study = Study("s", {"CC": CC}, {"IMPRESSION": IMPRESSION})
    ex = build_example(study, AugmentationConfig(target_size=(8, 6)), None, np.random.default_rng(0))
    assert ex.image.shape == ex.image_aug.shape == (8, 6)


def test_attribute_only_draws():
    f = Finding(subtype="punctate", laterality="right", depth="mid", position="lower")
    attrs = AttributeVector(("mass", "calcification"), (0, 1), {"calcification": (f,)})
    study = Study("s", {"CC": CC}, attributes=attrs)
    bank = BANK
    for seed in range(10):
        ex = build_example(study, CFG, bank, np.random.default_rng(seed), preprocess=False)
        rng = np.random.default_rng(seed)
        augment_image(CC, CFG, rng)
        first = synthesize_report(attrs, bank, rng)
        second = synthesize_report(attrs, bank, rng)
        assert ex.text == first
        assert ex.text_aug == augment_text(second, rng)


def test_unbuildable_without_text_sources():
    study = Study("s", {"CC": CC})
    with pytest.raises(Unbuildable):
        build_example(study, CFG, BANK, np.random.default_rng(0), preprocess=False)
    with pytest.raises(Unbuildable):
        build_example(Study("s", {"CC": CC}, attributes=ATTRS), CFG, None, np.random.default_rng(0))


def test_example_invariants():
    with pytest.raises(ValidationError):
        MultiViewExample(CC, CC[:4], "a", "b", "s")
    with pytest.raises(ValidationError):
        MultiViewExample(CC, CC, "a", " ", "s")
