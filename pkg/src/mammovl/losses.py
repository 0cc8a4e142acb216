"""Contrastive losses: directional InfoNCE, the pairwise MVS sum, total objective."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Mapping

import torch
from torch import nn

from .exceptions import NonNormalizedInput, ShapeMismatch, UnknownMode

TAU_MIN, TAU_MAX = 1e-3, 10.0
NORM_TOL = 1e-4

IMAGE, IMAGE_AUG, TEXT, TEXT_AUG = "image", "image_aug", "text", "text_aug"
SETS = (IMAGE, IMAGE_AUG, TEXT, TEXT_AUG)
ORDERED_PAIRS = tuple(itertools.permutations(SETS, 2))
CROSS_MODAL = tuple(p for p in ORDERED_PAIRS if (p[0] in (IMAGE, IMAGE_AUG)) != (p[1] in (IMAGE, IMAGE_AUG)))
MODES = ("final_paper", "draft_weighted")


class Temperature(nn.Module):
    """Learnable softmax temperature stored as ``log_tau``."""

    def __init__(self, init: float = 0.07):
        super().__init__()
        self.log_tau = nn.Parameter(torch.tensor(math.log(init)))

    @property
    def tau(self) -> torch.Tensor:
        return self.log_tau.exp()

    @torch.no_grad()
    def clamp_(self) -> None:
        self.log_tau.clamp_(math.log(TAU_MIN), math.log(TAU_MAX))

    def forward(self) -> torch.Tensor:
        return self.tau


def _tau(tau):
    if isinstance(tau, Temperature):
        return tau.tau
    return tau  # a plain float keeps full precision; as_tensor would round it to float32


def check_normalized(z: torch.Tensor, tol: float = NORM_TOL) -> None:
    dev = (z.detach().norm(dim=-1) - 1).abs()
    if dev.numel() and float(dev.max()) > tol:
        raise NonNormalizedInput(f"row norm deviates from 1 by {float(dev.max()):.3g}")


def info_nce(z: torch.Tensor, z_other: torch.Tensor, tau) -> torch.Tensor:
    """Mean over rows of ``-log softmax(z @ z_other.T / tau)`` at the diagonal."""
    if z.ndim != 2 or z.shape != z_other.shape:
        raise ShapeMismatch(f"expected matching (B, d) inputs, got {tuple(z.shape)} and {tuple(z_other.shape)}")
    check_normalized(z)
    check_normalized(z_other)
    logits = z @ z_other.T / _tau(tau)
    return (torch.logsumexp(logits, dim=1) - logits.diagonal()).mean()


@dataclass
class PairWeights:
    """Weight of every ordered pair of representation sets.

    Unlisted pairs default to 1.0.  ``final_paper`` halves both text-text
    directions; ``draft_weighted`` averages each symmetric pair and scales
    the intra-modal pairs by ``lambda_image`` / ``lambda_text``.
    """

    weight: Mapping[tuple[str, str], float] = field(default_factory=dict)

    def __post_init__(self):
        w = {p: 1.0 for p in ORDERED_PAIRS}
        for pair, value in dict(self.weight).items():
            pair = tuple(pair)
            if pair not in w:
                raise ValueError(f"unknown pair {pair}")
            if value < 0:
                raise ValueError(f"weight for {pair} must be >= 0")
            w[pair] = float(value)
        self.weight = w

    def __getitem__(self, pair) -> float:
        return self.weight[tuple(pair)]

    def total(self) -> float:
        return sum(self.weight.values())

    @classmethod
    def final_paper(cls, text_pair_weight: float = 0.5) -> "PairWeights":
        return cls({(TEXT, TEXT_AUG): text_pair_weight, (TEXT_AUG, TEXT): text_pair_weight})

    @classmethod
    def draft_weighted(cls, lambda_image: float = 1.0, lambda_text: float = 1.0) -> "PairWeights":
        w = {p: 0.5 for p in CROSS_MODAL}
        w[(IMAGE, IMAGE_AUG)] = w[(IMAGE_AUG, IMAGE)] = 0.5 * lambda_image
        w[(TEXT, TEXT_AUG)] = w[(TEXT_AUG, TEXT)] = 0.5 * lambda_text
        return cls(w)


@dataclass
class RepresentationBatch:
    image: torch.Tensor
    image_aug: torch.Tensor
    text: torch.Tensor
    text_aug: torch.Tensor

    def __post_init__(self):
        shapes = {tuple(t.shape) for t in self.sets().values()}
        if len(shapes) != 1 or len(next(iter(shapes))) != 2:
            raise ShapeMismatch(f"representation sets must share (B, d), got {shapes}")

    def sets(self) -> dict[str, torch.Tensor]:
        return {IMAGE: self.image, IMAGE_AUG: self.image_aug, TEXT: self.text, TEXT_AUG: self.text_aug}

    def check_normalized(self, tol: float = NORM_TOL) -> None:
        for z in self.sets().values():
            check_normalized(z, tol)


def mvs_terms(batch: RepresentationBatch, tau, weights: PairWeights | None = None) -> dict:
    """Every weighted ordered-pair term; zero-weight pairs are skipped."""
    weights = weights or PairWeights.final_paper()
    sets = batch.sets()
    return {
        (a, b): weights[(a, b)] * info_nce(sets[a], sets[b], tau)
        for a, b in ORDERED_PAIRS
        if weights[(a, b)] != 0
    }


def mvs_loss(batch: RepresentationBatch, tau, weights: PairWeights | None = None) -> torch.Tensor:
    terms = mvs_terms(batch, tau, weights)
    if not terms:
        return batch.image.new_zeros(())
    return torch.stack(list(terms.values())).sum()


def mode_weights(mode: str, lambda_image: float = 1.0, lambda_text: float = 1.0,
                 text_pair_weight: float = 0.5) -> PairWeights:
    if mode == "final_paper":
        return PairWeights.final_paper(text_pair_weight)
    if mode == "draft_weighted":
        return PairWeights.draft_weighted(lambda_image, lambda_text)
    raise UnknownMode(f"unknown loss mode {mode!r}; expected one of {MODES}")


def total_loss(batch: RepresentationBatch, tau, mode: str = "final_paper",
               lambda_image: float = 1.0, lambda_text: float = 1.0) -> torch.Tensor:
    """Pretraining objective; both modes reduce to ``mvs_loss`` with a weight table."""
    return mvs_loss(batch, tau, mode_weights(mode, lambda_image, lambda_text))
