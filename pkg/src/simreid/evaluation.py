"""Monte-Carlo closed-set ranking evaluation and the verification decision.

One evaluation episode walks every test individual that has at least two
images: a random query image is drawn, one random positive from the same
individual, and one random image from every other individual as the
negatives.  Candidates are ranked by ascending embedding distance to the
query.  With a single relevant item per query, average precision
truncated at k reduces to 1/rank when the positive lands in the top k,
so mAP@k is the mean of that quantity; a config switch reports plain
hit@k instead, since some ranking benchmarks quote that.

The reported spread is the standard deviation across repetition means.
Individuals with a single image cannot be queried (there is no positive
left to find) but still serve as negatives.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model
from .data import Manifest, sample_features
from .numeric import check_same_dim, euclidean_distance
from .rng import RngStream

AP_MODES = ("ap", "hit")


@dataclass(frozen=True)
class EvalConfig:
    repetitions: int = 1000
    k_values: tuple[int, ...] = (1, 5)
    seed: int = 0
    ap_mode: str = "ap"

    def __post_init__(self):
        if self.repetitions < 1:
            raise ValueError(f"repetitions must be >= 1, got {self.repetitions}")
        if not self.k_values or any(k < 1 for k in self.k_values):
            raise ValueError(f"every k must be >= 1, got {self.k_values}")
        if self.ap_mode not in AP_MODES:
            raise ValueError(f"ap_mode must be one of {AP_MODES}, got {self.ap_mode!r}")


@dataclass
class QueryResult:
    individual_id: str
    ranked_ids: list[str]
    rank_of_positive: int  # 1-based


@dataclass
class EpisodeResult:
    queries: list[QueryResult]

    def mean_score(self, k: int, ap_mode: str = "ap") -> float:
        scores = [
            score_at_k(q.rank_of_positive, k, ap_mode) for q in self.queries
        ]
        return float(np.mean(scores))


class EmbeddedSet:
    """Labels plus embeddings with the pairwise distances cached."""

    def __init__(self, labels: list[str], embeddings: np.ndarray):
        self.labels = list(labels)
        self.embeddings = np.asarray(embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2 or len(self.labels) != self.embeddings.shape[0]:
            raise ValueError("need one label per embedding row")
        self.groups: dict[str, list[int]] = {}
        for i, lab in enumerate(self.labels):
            self.groups.setdefault(lab, []).append(i)
        self.groups = {k: self.groups[k] for k in sorted(self.groups)}
        diff = self.embeddings[:, None, :] - self.embeddings[None, :, :]
        self.distances = np.sqrt(np.sum(diff * diff, axis=2))

    @classmethod
    def from_manifest(
        cls, manifest: Manifest, net: model.EmbeddingNet | None, image_root=None
    ) -> "EmbeddedSet":
        feats = np.array([sample_features(s, image_root) for s in manifest.samples])
        emb = feats if net is None else model.forward_many(net, feats)
        return cls([s.individual_id for s in manifest.samples], emb)

    def eligible_queries(self) -> list[str]:
        return [ind for ind, idxs in self.groups.items() if len(idxs) >= 2]


def ap_at_k(rank_of_positive: int, k: int) -> float:
    """Single-positive AP truncated at k: 1/rank inside the top k, else 0."""
    if rank_of_positive < 1:
        raise ValueError(f"rank must be >= 1, got {rank_of_positive}")
    return 1.0 / rank_of_positive if rank_of_positive <= k else 0.0


def hit_at_k(rank_of_positive: int, k: int) -> float:
    if rank_of_positive < 1:
        raise ValueError(f"rank must be >= 1, got {rank_of_positive}")
    return 1.0 if rank_of_positive <= k else 0.0


def score_at_k(rank_of_positive: int, k: int, ap_mode: str = "ap") -> float:
    return ap_at_k(rank_of_positive, k) if ap_mode == "ap" else hit_at_k(rank_of_positive, k)


def sample_episode_embedded(embedded: EmbeddedSet, rng: RngStream) -> EpisodeResult:
    """One repetition: a ranked candidate set for every eligible individual.

    The candidate list is the positive followed by the per-individual
    negatives in sorted-id order; ranking sorts by distance with a stable
    tiebreak on that order, so exact ties resolve toward the positive.
    """
    individuals = list(embedded.groups)
    if len(individuals) < 2:
        raise ValueError(f"need >= 2 test individuals, got {len(individuals)}")
    queries: list[QueryResult] = []
    for ind in embedded.eligible_queries():
        own = embedded.groups[ind]
        q = own[rng.randint(len(own))]
        others = [i for i in own if i != q]
        p = others[rng.randint(len(others))]
        cand_idxs = [p]
        cand_ids = [ind]
        for other in individuals:
            if other == ind:
                continue
            pool = embedded.groups[other]
            cand_idxs.append(pool[rng.randint(len(pool))])
            cand_ids.append(other)
        dists = embedded.distances[q, cand_idxs]
        order = np.argsort(dists, kind="stable")
        rank = int(np.nonzero(order == 0)[0][0]) + 1
        queries.append(
            QueryResult(ind, [cand_ids[j] for j in order], rank)
        )
    return EpisodeResult(queries)


def sample_episode(
    test: Manifest, net: model.EmbeddingNet | None, rng: RngStream, image_root=None
) -> EpisodeResult:
    return sample_episode_embedded(
        EmbeddedSet.from_manifest(test, net, image_root), rng
    )


@dataclass
class MapEstimate:
    mean: float
    std: float
    repetitions: int

    @property
    def std_error(self) -> float:
        return self.std / np.sqrt(self.repetitions)


def map_at_k_embedded(embedded: EmbeddedSet, cfg: EvalConfig) -> dict[int, MapEstimate]:
    """Monte-Carlo mAP@k: mean and std over repetition means."""
    rng = RngStream(cfg.seed)
    per_rep: dict[int, list[float]] = {k: [] for k in cfg.k_values}
    for rep in range(cfg.repetitions):
        episode = sample_episode_embedded(embedded, rng.derive(rep))
        for k in cfg.k_values:
            per_rep[k].append(episode.mean_score(k, cfg.ap_mode))
    out = {}
    for k, values in per_rep.items():
        arr = np.array(values)
        std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
        out[k] = MapEstimate(float(arr.mean()), std, cfg.repetitions)
    return out


def map_at_k(
    test: Manifest,
    net: model.EmbeddingNet | None,
    cfg: EvalConfig,
    image_root=None,
) -> dict[int, MapEstimate]:
    return map_at_k_embedded(EmbeddedSet.from_manifest(test, net, image_root), cfg)


# ---------------------------------------------------------------------------
# Verification


def verify(e1, e2, threshold: float) -> bool:
    """Same-individual decision: distance at or under the threshold."""
    if threshold < 0:
        raise ValueError(f"threshold must be >= 0, got {threshold}")
    e1 = np.asarray(e1, dtype=np.float64)
    e2 = np.asarray(e2, dtype=np.float64)
    check_same_dim(e1, e2)
    return euclidean_distance(e1, e2) <= threshold


def calibrate_threshold(embedded: EmbeddedSet) -> tuple[float, float]:
    """Max-accuracy distance threshold over all same/different pairs.

    Returns (threshold, accuracy).  Candidate cuts are midpoints between
    consecutive sorted pair distances plus the extremes; ties prefer the
    smallest threshold.
    """
    n = len(embedded.labels)
    if n < 2:
        raise ValueError("need at least two embeddings to calibrate")
    dists = []
    same = []
    for i in range(n):
        for j in range(i + 1, n):
            dists.append(embedded.distances[i, j])
            same.append(embedded.labels[i] == embedded.labels[j])
    dists = np.array(dists)
    same = np.array(same)
    if not same.any() or same.all():
        raise ValueError("calibration needs both same and different pairs")
    order = np.argsort(dists, kind="stable")
    dists = dists[order]
    same = same[order]
    # Accuracy of "same iff d <= cut" after each prefix of the sorted pairs.
    same_prefix = np.concatenate([[0], np.cumsum(same)])
    total_same = int(same.sum())
    total = len(same)
    cuts = np.concatenate([[dists[0] / 2.0], (dists[:-1] + dists[1:]) / 2.0, [dists[-1] + 1.0]])
    best_t, best_acc = 0.0, -1.0
    for idx, cut in enumerate(cuts):
        # cut must fall strictly below the first distance it rejects,
        # otherwise tied distances straddle it and the count is wrong.
        if idx < total and cut >= dists[idx]:
            continue
        correct = same_prefix[idx] + ((total - idx) - (total_same - same_prefix[idx]))
        acc = correct / total
        if acc > best_acc + 1e-15:
            best_t, best_acc = float(cut), float(acc)
    return best_t, best_acc
