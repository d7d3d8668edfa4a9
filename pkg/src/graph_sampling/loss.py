"""Batch-hard triplet loss over a mini-batch similarity matrix.

For every anchor the hardest positive (lowest similarity among other
samples of its class) and the hardest negative (highest similarity among
samples of other classes) form the triplet; the loss is the sum over
anchors of ``max(0, m - s(a, p*) + s(a, n*))``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ValidationError

__all__ = ["LossConfig", "LossOutput", "batch_hard_triplet", "brute_force_triplet_oracle"]


@dataclass(frozen=True)
class LossConfig:
    margin: float = 16.0

    def __post_init__(self):
        if not math.isfinite(self.margin):
            raise ConfigError(f"margin must be finite, got {self.margin}")


@dataclass(eq=False)
class LossOutput:
    value: float
    grad_similarity: np.ndarray
    active_count: int
    anchors_total: int
    hardest_positive: np.ndarray
    hardest_negative: np.ndarray

    @property
    def mean(self) -> float:
        return self.value / self.anchors_total

    @property
    def active_fraction(self) -> float:
        return self.active_count / self.anchors_total


def _check(sim, labels):
    sim = np.asarray(sim, dtype=np.float64)
    labels = np.asarray(labels).reshape(-1)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1] or sim.shape[0] != labels.size:
        raise ValidationError(
            f"similarity must be B x B with B={labels.size} labels, got shape {sim.shape}")
    if not np.all(np.isfinite(sim)):
        raise ValidationError("similarity matrix has non-finite entries")
    _, counts = np.unique(labels, return_counts=True)
    if np.any(counts < 2):
        raise ValidationError("anchor has no positive: every class needs K >= 2 samples")
    if counts.size < 2:
        raise ValidationError("anchor has no negative: batch holds a single class")
    return sim, labels


def _margin(cfg):
    return cfg.margin if isinstance(cfg, LossConfig) else float(cfg)


def batch_hard_triplet(sim, labels, cfg=LossConfig()) -> LossOutput:
    """Loss value, ``d loss / d sim`` and hardness statistics for one batch.

    ``cfg`` is a :class:`LossConfig` or a bare margin.  Argmin/argmax ties
    resolve to the lowest column index; an anchor whose hinge is exactly
    zero is inactive and contributes no gradient.
    """
    sim, labels = _check(sim, labels)
    m = _margin(cfg)
    B = labels.size
    same = labels[:, None] == labels[None, :]
    pos = same.copy()
    np.fill_diagonal(pos, False)
    rows = np.arange(B)

    hard_pos = np.argmin(np.where(pos, sim, np.inf), axis=1)
    hard_neg = np.argmax(np.where(same, -np.inf, sim), axis=1)
    terms = m - sim[rows, hard_pos] + sim[rows, hard_neg]
    active = terms > 0

    grad = np.zeros_like(sim)
    grad[rows[active], hard_pos[active]] -= 1.0
    grad[rows[active], hard_neg[active]] += 1.0
    value = math.fsum(terms[active].tolist())
    return LossOutput(value, grad, int(active.sum()), B, hard_pos, hard_neg)


def brute_force_triplet_oracle(sim, labels, cfg=LossConfig()) -> LossOutput:
    """Reference implementation: score every (anchor, positive, negative) triple.

    For each anchor the first triple (in positive-major, negative-minor
    order) reaching the largest hinge argument is kept.
    """
    sim, labels = _check(sim, labels)
    m = _margin(cfg)
    B = labels.size
    grad = np.zeros((B, B))
    hard_pos = np.zeros(B, dtype=np.int64)
    hard_neg = np.zeros(B, dtype=np.int64)
    kept = []
    active = 0
    for a in range(B):
        best = None
        for p in range(B):
            if p == a or labels[p] != labels[a]:
                continue
            for n in range(B):
                if labels[n] == labels[a]:
                    continue
                term = m - float(sim[a, p]) + float(sim[a, n])
                if best is None or term > best[0]:
                    best = (term, p, n)
        term, p, n = best
        hard_pos[a], hard_neg[a] = p, n
        if term > 0:
            kept.append(term)
            active += 1
            grad[a, p] -= 1.0
            grad[a, n] += 1.0
    return LossOutput(math.fsum(kept), grad, active, B, hard_pos, hard_neg)
