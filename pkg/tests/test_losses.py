import math

import numpy as np
import pytest
import torch

import oracles
from mammovl.exceptions import NonNormalizedInput, ShapeMismatch, UnknownMode
from mammovl.losses import (CROSS_MODAL, ORDERED_PAIRS, SETS, TAU_MAX, TAU_MIN, PairWeights, RepresentationBatch,
                            Temperature, info_nce, mode_weights, mvs_loss, mvs_terms, total_loss)


def unit(rng, B, d=5):
    z = rng.normal(size=(B, d))
    return torch.as_tensor(z / np.linalg.norm(z, axis=1, keepdims=True))


def batch(rng, B, d=5):
    return RepresentationBatch(*(unit(rng, B, d) for _ in SETS))


def test_single_row_is_zero(rng):
    assert float(info_nce(unit(rng, 1), unit(rng, 1), 0.07)) == 0.0


def test_two_row_fixture():
    z = torch.eye(2, dtype=torch.float64)
    assert float(info_nce(z, z, 1.0)) == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-12)
    assert float(info_nce(z, z, 1.0)) == pytest.approx(0.31326, abs=1e-5)


@pytest.mark.parametrize("B", range(1, 9))
def test_matches_double_loop_oracle(B, rng):
    for tau in (0.07, 0.5, 2.0):
        a, b = unit(rng, B), unit(rng, B)
        assert float(info_nce(a, b, tau)) == pytest.approx(oracles.info_nce(a, b, tau), abs=1e-6)


def test_bounds(rng):
    for B in range(1, 9):
        a, b = unit(rng, B), unit(rng, B)
        logits = (a @ b.T / 0.1).numpy()
        gap = float(np.max(logits.max(1) - logits.diagonal()))
        value = float(info_nce(a, b, 0.1))
        assert 0.0 <= value <= math.log(B) + gap + 1e-9


def test_input_errors(rng):
    with pytest.raises(ShapeMismatch):
        info_nce(unit(rng, 3), unit(rng, 4), 0.1)
    with pytest.raises(ShapeMismatch):
        info_nce(unit(rng, 3)[0], unit(rng, 3)[0], 0.1)
    with pytest.raises(NonNormalizedInput):
        info_nce(unit(rng, 3) * 1.001, unit(rng, 3), 0.1)
    info_nce(unit(rng, 3) * (1 + 5e-5), unit(rng, 3), 0.1)


def test_mvs_identical_single_row_is_zero(rng):
    z = unit(rng, 1)
    assert float(mvs_loss(RepresentationBatch(z, z, z, z), 0.07)) == 0.0


def test_default_weight_table():
    w = PairWeights.final_paper()
    assert len(ORDERED_PAIRS) == 12 and w.total() == 11.0
    assert w[("text", "text_aug")] == w[("text_aug", "text")] == 0.5
    assert len(CROSS_MODAL) == 8


@pytest.mark.parametrize("B", [1, 2, 3, 4])
def test_mvs_matches_term_by_term_oracle(B, rng):
    rb = batch(rng, B)
    sets = {k: v for k, v in rb.sets().items()}
    weights = {p: (0.5 if set(p) == {"text", "text_aug"} else 1.0) for p in ORDERED_PAIRS}
    assert len(mvs_terms(rb, 0.1)) == 12
    assert float(mvs_loss(rb, 0.1)) == pytest.approx(oracles.weighted_sum(sets, weights, 0.1), abs=1e-6)


def test_draft_with_zero_lambdas_is_cross_modal_only(rng):
    rb = batch(rng, 4)
    sets = rb.sets()
    expected = sum(0.5 * oracles.info_nce(sets[a], sets[b], 0.2) for a, b in CROSS_MODAL)
    got = total_loss(rb, 0.2, "draft_weighted", lambda_image=0.0, lambda_text=0.0)
    assert float(got) == pytest.approx(expected, abs=1e-6)
    assert len(mvs_terms(rb, 0.2, mode_weights("draft_weighted", 0.0, 0.0))) == 8


def test_final_mode_reduces_to_mvs(rng):
    rb = batch(rng, 4)
    assert float(total_loss(rb, 0.3)) == float(mvs_loss(rb, 0.3))


def test_draft_weight_table(rng):
    rb = batch(rng, 4)
    sets = rb.sets()
    table = {p: 0.5 for p in CROSS_MODAL}
    table.update({("image", "image_aug"): 0.5, ("image_aug", "image"): 0.5,
                  ("text", "text_aug"): 0.25, ("text_aug", "text"): 0.25})
    got = total_loss(rb, 0.1, "draft_weighted", lambda_image=1.0, lambda_text=0.5)
    assert float(got) == pytest.approx(oracles.weighted_sum(sets, table, 0.1), abs=1e-6)


def test_unknown_mode(rng):
    with pytest.raises(UnknownMode):
        total_loss(batch(rng, 2), 0.1, "nope")


def test_permutation_equivariance(rng):
    rb = batch(rng, 6)
    perm = torch.as_tensor(rng.permutation(6))
    permuted = RepresentationBatch(*(rb.sets()[k][perm] for k in SETS))
    assert float(mvs_loss(permuted, 0.1)) == pytest.approx(float(mvs_loss(rb, 0.1)), abs=1e-12)
    a, b = rb.image, rb.text
    assert float(info_nce(a[perm], b[perm], 0.1)) == pytest.approx(float(info_nce(a, b, 0.1)), abs=1e-12)


def test_pair_symmetry(rng):
    a, b = unit(rng, 5), unit(rng, 5)
    assert float(info_nce(a, b, 0.1) + info_nce(b, a, 0.1)) == pytest.approx(
        float(info_nce(b, a, 0.1) + info_nce(a, b, 0.1)), abs=1e-12)


def test_monotone_in_positive_similarity():
    # each pair lives in its own 2-D subspace, so cross similarities stay 0
    B = 3
    prev = math.inf
    for angle in np.linspace(1.5, 0.0, 7):
        z = torch.zeros(B, 2 * B, dtype=torch.float64)
        zt = torch.zeros_like(z)
        for i in range(B):
            zt[i, 2 * i] = 1.0
            z[i, 2 * i] = 1.0
        z[0, 0], z[0, 1] = math.cos(angle), math.sin(angle)
        value = float(info_nce(z, zt, 0.5))
        assert value < prev
        prev = value


def test_gradients_match_finite_differences(rng):
    a = unit(rng, 4).requires_grad_(True)
    b = unit(rng, 4).requires_grad_(True)
    temp = Temperature(0.3).double()

    def loss():
        return info_nce(a, b, temp)

    assert oracles.grad_rel_error(loss, [a, b, temp.log_tau]) < 1e-4


def test_temperature_clamp():
    t = Temperature()
    assert t.tau.item() == pytest.approx(0.07)
    with torch.no_grad():
        t.log_tau.fill_(20.0)
    t.clamp_()
    assert t.tau.item() == pytest.approx(TAU_MAX)
    with torch.no_grad():
        t.log_tau.fill_(-20.0)
    t.clamp_()
    assert t.tau.item() == pytest.approx(TAU_MIN)


def test_pair_weight_validation():
    with pytest.raises(ValueError):
        PairWeights({("image", "image"): 1.0})
    with pytest.raises(ValueError):
        PairWeights({("image", "text"): -1.0})
