"""Pair and semi-hard triplet construction from a labeled mini-batch.

Siamese training uses balanced random pairs: every sample that has a
same-identity partner in the batch anchors one positive and one negative
pair.  Triplet training walks every (anchor, positive) ordered pair and
draws the negative uniformly from the semi-hard band

    d(a, p) < d(a, n) < d(a, p) + margin

(squared distances when the loss uses them).  When the band is empty the
fallback keeps the anchor trainable: the closest negative beyond the
positive if one exists, otherwise the closest negative overall; such
triplets are flagged so callers can tell them apart.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .losses import LossConfig
from .numeric import pairwise_sq_distances
from .rng import RngStream


class MiningError(ValueError):
    """The batch cannot supply the requested pairs or triplets."""


@dataclass
class LabeledBatch:
    """Embeddings (n, d) with one identity label per row."""

    embeddings: np.ndarray
    labels: list[str]
    _by_label: dict[str, list[int]] = field(init=False, repr=False)

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2:
            raise ValueError("embeddings must be a (n, d) matrix")
        if len(self.labels) != self.embeddings.shape[0]:
            raise ValueError(
                f"{self.embeddings.shape[0]} embeddings but {len(self.labels)} labels"
            )
        if self.size < 2:
            raise ValueError("a batch needs at least 2 samples")
        self._by_label = {}
        for i, lab in enumerate(self.labels):
            self._by_label.setdefault(lab, []).append(i)

    @property
    def size(self) -> int:
        return self.embeddings.shape[0]

    def positives_of(self, i: int) -> list[int]:
        return [j for j in self._by_label[self.labels[i]] if j != i]

    def negatives_of(self, i: int) -> list[int]:
        lab = self.labels[i]
        return [j for j in range(self.size) if self.labels[j] != lab]


@dataclass(frozen=True)
class Triplet:
    anchor: int
    positive: int
    negative: int
    fallback: bool = False


def sample_pairs(batch: LabeledBatch, rng: RngStream) -> list[tuple[int, int, bool]]:
    """Balanced pair set: (i, j, same) per anchor with an available positive."""
    anchors = [i for i in range(batch.size) if batch.positives_of(i)]
    if not anchors:
        raise MiningError("no positive pairs available")
    pairs: list[tuple[int, int, bool]] = []
    for i in anchors:
        negatives = batch.negatives_of(i)
        if not negatives:
            raise MiningError("no negative pairs available: all labels identical")
        pairs.append((i, rng.choice(batch.positives_of(i)), True))
        pairs.append((i, rng.choice(negatives), False))
    return pairs


def mine_semi_hard_triplets(
    batch: LabeledBatch, cfg: LossConfig, rng: RngStream
) -> list[Triplet]:
    """One triplet per (anchor, positive) ordered pair in the batch."""
    d2 = pairwise_sq_distances(batch.embeddings)
    dist = d2 if cfg.squared_distances else np.sqrt(d2)

    triplets: list[Triplet] = []
    for a in range(batch.size):
        positives = batch.positives_of(a)
        if not positives:
            continue
        negatives = batch.negatives_of(a)
        if not negatives:
            raise MiningError("no negatives available: all labels identical")
        for p in positives:
            d_ap = dist[a, p]
            band = [n for n in negatives if d_ap < dist[a, n] < d_ap + cfg.margin]
            if band:
                triplets.append(Triplet(a, p, band[rng.randint(len(band))]))
                continue
            beyond = [n for n in negatives if dist[a, n] > d_ap]
            pool = beyond if beyond else negatives
            n_best = min(pool, key=lambda n: (dist[a, n], n))
            triplets.append(Triplet(a, p, n_best, fallback=True))
    if not triplets:
        raise MiningError("no anchor-positive pairs available")
    return triplets
