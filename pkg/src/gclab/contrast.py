"""Discriminators and mutual-information estimators."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DISCRIMINATORS = ("inner", "bilinear")
ESTIMATORS = ("jsd", "infonce")


@dataclass
class DiscriminatorConfig:
    kind: str = "inner"
    bilinear_weight: Optional[Tensor] = None

    def __post_init__(self):
        if self.kind not in DISCRIMINATORS:
            raise ValueError(f"unknown discriminator {self.kind!r}")
        if (self.kind == "bilinear") != (self.bilinear_weight is not None):
            raise ValueError("bilinear_weight must be given exactly when kind='bilinear'")
        if self.bilinear_weight is not None:
            s = self.bilinear_weight.shape
            if len(s) != 2 or s[0] != s[1]:
                raise ValueError(f"bilinear weight must be square, got {s}")


def score(disc: DiscriminatorConfig, anchor: Tensor, context: Tensor) -> Tensor:
    """Row-wise scores f(a_i, c_i) as a column vector."""
    if anchor.shape != context.shape:
        raise ad.ShapeError(f"score: anchor {anchor.shape} vs context {context.shape}")
    if disc.kind == "bilinear":
        if disc.bilinear_weight.shape[0] != anchor.shape[1]:
            raise ad.ShapeError(
                f"score: bilinear weight {disc.bilinear_weight.shape} vs embedding dim {anchor.shape[1]}")
        anchor = ad.matmul(anchor, disc.bilinear_weight)
    return ad.reduce_sum(ad.mul(anchor, context), axis=1)


def score_matrix(disc: DiscriminatorConfig, anchors: Tensor, candidates: Tensor) -> Tensor:
    """All-pairs scores [num_anchors x num_candidates]."""
    if anchors.shape[1] != candidates.shape[1]:
        raise ad.ShapeError(f"score: anchor {anchors.shape} vs context {candidates.shape}")
    if disc.kind == "bilinear":
        anchors = ad.matmul(anchors, disc.bilinear_weight)
    return ad.matmul(anchors, ad.transpose(candidates))


@dataclass
class ScoredBatch:
    """Positive scores [P, 1] plus either explicit negatives [P, N] or an in-batch matrix.

    In-batch mode stores ``matrix`` [A, C] of anchor-vs-candidate scores,
    ``negative_mask`` [A, C] (True where the candidate is a negative for that
    anchor) and ``pair_anchor`` [P] mapping each pair to its anchor row.
    """
    positive: Tensor
    negative: Optional[Tensor] = None
    matrix: Optional[Tensor] = None
    negative_mask: Optional[np.ndarray] = None
    pair_anchor: Optional[np.ndarray] = None

    @property
    def num_pairs(self) -> int:
        return self.positive.shape[0]


def estimate_jsd(batch: ScoredBatch) -> Tensor:
    """Mean over pairs of logsigmoid(f+) + mean_i logsigmoid(-f-_i)."""
    if batch.num_pairs == 0:
        raise ValueError("estimate_jsd: empty batch")
    if batch.negative is None:
        raise ValueError("estimate_jsd needs explicit negatives")
    pos = ad.logsigmoid(batch.positive)
    neg = ad.reduce_mean(ad.logsigmoid(ad.scale(batch.negative, -1.0)), axis=1)
    return ad.reduce_mean(ad.add(pos, neg))


def estimate_infonce(batch: ScoredBatch, temperature: float = 1.0) -> Tensor:
    """Mean over pairs of f+ - log(exp f+ + sum exp f-), via log-sum-exp."""
    if batch.num_pairs == 0:
        raise ValueError("estimate_infonce: empty batch")
    pos = batch.positive
    if batch.matrix is None:
        neg = batch.negative
        if temperature != 1.0:
            pos, neg = ad.scale(pos, 1 / temperature), ad.scale(neg, 1 / temperature)
        logits = ad.concat([pos, neg], axis=1) if neg.shape[1] else pos
        return ad.reduce_mean(ad.sub(pos, ad.logsumexp(logits)))
    m = batch.matrix
    if temperature != 1.0:
        pos, m = ad.scale(pos, 1 / temperature), ad.scale(m, 1 / temperature)
    masked = ad.add(m, np.where(batch.negative_mask, 0.0, -np.inf))
    neg_lse = ad.gather(ad.logsumexp(masked), batch.pair_anchor)
    total = ad.logsumexp(ad.concat([pos, neg_lse], axis=1))
    return ad.reduce_mean(ad.sub(pos, total))


ESTIMATOR_FNS = {"jsd": estimate_jsd, "infonce": estimate_infonce}
