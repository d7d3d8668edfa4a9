"""Single-query retrieval evaluation: CMC Rank-1, mAP and mAcc.

Synthetic data has no camera ids, so no same-camera junk filtering is
applied; numbers are not comparable with person re-id benchmark tables.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .data import LabeledFeatureSet
from .errors import ValidationError
from .metric import EUCLIDEAN, pairwise_distance

__all__ = [
    "EvalSplit",
    "EvalReport",
    "make_split",
    "evaluate",
    "evaluate_embeddings",
    "average_precision",
    "macc",
    "write_eval_csv",
    "read_eval_csv",
]


@dataclass(frozen=True, eq=False)
class EvalSplit:
    query: LabeledFeatureSet
    gallery: LabeledFeatureSet
    query_indices: np.ndarray = None
    gallery_indices: np.ndarray = None


@dataclass(frozen=True, eq=False)
class EvalReport:
    rank1: float
    map: float
    num_queries: int
    ap: np.ndarray

    @property
    def macc(self) -> float:
        return (self.rank1 + self.map) / 2.0


def make_split(fs: LabeledFeatureSet, queries_per_class: int, seed) -> EvalSplit:
    """Pick ``queries_per_class`` queries per class uniformly; the rest form the gallery.

    Query and gallery keep the class ids of ``fs``.
    """
    if queries_per_class < 1:
        raise ValidationError("queries_per_class must be >= 1")
    sizes = np.bincount(fs.labels)
    if sizes.min() <= queries_per_class:
        c = int(np.argmin(sizes))
        raise ValidationError(
            f"class {c} has {sizes[c]} samples; need more than queries_per_class="
            f"{queries_per_class} to leave a gallery match")
    rng = np.random.default_rng(seed)
    is_query = np.zeros(len(fs), dtype=bool)
    for c in range(fs.num_classes):
        members = np.flatnonzero(fs.labels == c)
        is_query[rng.choice(members, size=queries_per_class, replace=False)] = True
    q_idx = np.flatnonzero(is_query)
    g_idx = np.flatnonzero(~is_query)
    query = LabeledFeatureSet(fs.features[q_idx], fs.labels[q_idx], fs.original_ids)
    gallery = LabeledFeatureSet(fs.features[g_idx], fs.labels[g_idx], fs.original_ids)
    return EvalSplit(query, gallery, q_idx, g_idx)


def average_precision(matches: np.ndarray) -> float:
    """AP of one ranked 0/1 relevance vector: mean precision at each hit."""
    hits = np.flatnonzero(matches)
    if hits.size == 0:
        return 0.0
    precision = np.arange(1, hits.size + 1) / (hits + 1.0)
    return float(precision.mean())


def evaluate_embeddings(query_emb, query_labels, gallery_emb, gallery_labels,
                        metric: str = EUCLIDEAN) -> EvalReport:
    """Rank the gallery by distance for each query; ties go to the lower gallery index."""
    query_labels = np.asarray(query_labels)
    gallery_labels = np.asarray(gallery_labels)
    dist = pairwise_distance(query_emb, gallery_emb, metric)
    order = np.argsort(dist, axis=1, kind="stable")
    matches = gallery_labels[order] == query_labels[:, None]
    if not np.all(matches.any(axis=1)):
        raise ValidationError("a query has no gallery match")
    ap = np.array([average_precision(row) for row in matches])
    rank1 = float(np.mean(matches[:, 0]))
    return EvalReport(rank1, float(np.mean(ap)), int(query_labels.size), ap)


def evaluate(model, split: EvalSplit, metric: str = EUCLIDEAN) -> EvalReport:
    """Embed query and gallery with ``model`` (anything with ``forward``) and score."""
    return evaluate_embeddings(model.forward(split.query.features), split.query.labels,
                               model.forward(split.gallery.features), split.gallery.labels,
                               metric)


def macc(reports) -> float:
    """Unweighted mean of every Rank-1 and mAP value in ``reports``."""
    reports = list(reports)
    if not reports:
        raise ValidationError("mAcc of an empty report list")
    values = [r.rank1 for r in reports] + [r.map for r in reports]
    return float(np.mean(values))


EVAL_COLUMNS = ("split", "seed", "rank1", "map", "num_queries")


def write_eval_csv(rows, fh) -> None:
    """``rows`` are ``(split_name, seed, EvalReport)`` tuples."""
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(EVAL_COLUMNS)
    for name, seed, report in rows:
        writer.writerow([name, seed, repr(report.rank1), repr(report.map), report.num_queries])


def read_eval_csv(fh):
    if isinstance(fh, str):
        fh = io.StringIO(fh)
    reader = csv.DictReader(fh)
    if tuple(reader.fieldnames or ()) != EVAL_COLUMNS:
        raise ValidationError(f"unexpected eval CSV columns {reader.fieldnames}")
    return [(row["split"], int(row["seed"]), float(row["rank1"]), float(row["map"]),
             int(row["num_queries"])) for row in reader]
