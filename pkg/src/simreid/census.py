"""Open-set gallery simulation for population estimation.

Sightings arrive as a stream of embeddings.  Each one queries every
enrolled individual in the gallery; if the closest exemplar lies within
the match threshold the sighting is assigned to that individual (and
stored as a further exemplar while there is room), otherwise a new
individual is enrolled.  The gallery starts empty, so the number of
enrolled ids at the end of the stream is the population estimate.
Keeping several exemplars per id damps the drift that a single founder
image would cause as the gallery grows.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import model
from .data import Manifest, sample_features
from .numeric import check_same_dim


@dataclass
class SightingDecision:
    index: int
    matched: bool
    gallery_id: str
    min_distance: float | None  # None for the very first enrollment
    true_id: str | None = None


class Gallery:
    """Mutable store of enrolled individuals and their exemplar embeddings."""

    def __init__(self, match_threshold: float, max_exemplars_per_id: int = 5):
        if match_threshold < 0:
            raise ValueError(f"match_threshold must be >= 0, got {match_threshold}")
        if max_exemplars_per_id < 1:
            raise ValueError("max_exemplars_per_id must be >= 1")
        self.match_threshold = match_threshold
        self.max_exemplars_per_id = max_exemplars_per_id
        self.exemplars: dict[str, list[np.ndarray]] = {}
        self._next_index = 0
        self._steps = 0

    @property
    def population(self) -> int:
        return len(self.exemplars)

    def observe(self, embedding) -> SightingDecision:
        """Match-or-enroll one sighting; mutates the gallery."""
        emb = np.asarray(embedding, dtype=np.float64)
        index = self._steps
        self._steps += 1
        best_id = None
        best_dist = None
        for gid, stored in self.exemplars.items():
            check_same_dim(stored[0], emb)
            dists = np.linalg.norm(np.array(stored) - emb, axis=1)
            d = float(dists.min())
            if best_dist is None or d < best_dist:
                best_id, best_dist = gid, d
        if best_dist is not None and best_dist <= self.match_threshold:
            stored = self.exemplars[best_id]
            if len(stored) < self.max_exemplars_per_id:
                stored.append(emb.copy())
            return SightingDecision(index, True, best_id, best_dist)
        gid = f"g{self._next_index:04d}"
        self._next_index += 1
        self.exemplars[gid] = [emb.copy()]
        return SightingDecision(index, False, gid, best_dist)


@dataclass
class CensusReport:
    estimated_population: int
    decisions: list[SightingDecision]
    true_population: int | None = None
    assignment_precision: float | None = None
    assignment_recall: float | None = None
    notes: list[str] = field(default_factory=list)

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["index", "decision", "gallery_id", "min_distance"])
        for d in self.decisions:
            dist = "" if d.min_distance is None else repr(d.min_distance)
            writer.writerow(
                [d.index, "matched" if d.matched else "enrolled", d.gallery_id, dist]
            )
        summary = [f"estimated_population={self.estimated_population}"]
        if self.true_population is not None:
            summary.append(f"true_population={self.true_population}")
        if self.assignment_precision is not None:
            summary.append(f"precision={repr(self.assignment_precision)}")
        if self.assignment_recall is not None:
            summary.append(f"recall={repr(self.assignment_recall)}")
        writer.writerow(["summary", ";".join(summary), "", ""])
        return out.getvalue()


def run_census(
    sightings,
    threshold: float,
    net: model.EmbeddingNet | None = None,
    *,
    max_exemplars_per_id: int = 5,
    image_root=None,
) -> CensusReport:
    """Fold the match-or-enroll step over a sighting stream, in order.

    ``sightings`` is a Manifest or a list of (feature_vector, true_id)
    pairs with true_id possibly None.  When a net is given the features
    are embedded first, otherwise they are used as embeddings directly.
    """
    if isinstance(sightings, Manifest):
        stream = [
            (sample_features(s, image_root), s.individual_id) for s in sightings.samples
        ]
    else:
        stream = [(np.asarray(f, dtype=np.float64), tid) for f, tid in sightings]
    if not stream:
        raise ValueError("sighting stream is empty")

    gallery = Gallery(threshold, max_exemplars_per_id)
    founders: dict[str, str | None] = {}
    seen_true: set[str] = set()
    correct_matches = 0
    total_matches = 0
    should_match = 0
    decisions: list[SightingDecision] = []
    for feats, true_id in stream:
        emb = model.forward(net, feats)[0] if net is not None else feats
        decision = gallery.observe(emb)
        decision.true_id = true_id
        decisions.append(decision)
        if not decision.matched:
            founders[decision.gallery_id] = true_id
        if true_id is not None:
            if true_id in seen_true:
                should_match += 1
            if decision.matched:
                total_matches += 1
                if founders.get(decision.gallery_id) == true_id:
                    correct_matches += 1
            seen_true.add(true_id)

    truth_known = all(t is not None for _, t in stream)
    report = CensusReport(gallery.population, decisions)
    if truth_known:
        report.true_population = len(seen_true)
        if total_matches:
            report.assignment_precision = correct_matches / total_matches
        if should_match:
            report.assignment_recall = correct_matches / should_match
    return report
