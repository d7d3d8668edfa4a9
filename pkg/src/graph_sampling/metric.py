"""Pairwise distances, k-reciprocal re-ranking and diagonal masking.

Distances are plain ``ndarray`` matrices.  Losses use similarity
``s = -distance`` so the same hardest-positive/hardest-negative logic works
for every metric kind.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .errors import ConfigError, ValidationError

__all__ = [
    "EUCLIDEAN",
    "COSINE",
    "METRIC_KINDS",
    "normalize_kind",
    "pairwise_distance",
    "RerankConfig",
    "rerank",
    "mask_diagonal",
    "topk_smallest",
]

EUCLIDEAN = "euclidean"
COSINE = "cosine"
METRIC_KINDS = (EUCLIDEAN, COSINE)

_ALIASES = {"euclidean": EUCLIDEAN, "cosine": COSINE, "cosine-distance": COSINE}

# Expansion-formula entries below this fraction of |a|^2+|b|^2 are recomputed
# from explicit differences (cancellation would cost digits there).
_CANCEL_RATIO = 1e-4


def normalize_kind(kind: str) -> str:
    try:
        return _ALIASES[kind]
    except KeyError:
        raise ConfigError(f"unknown metric kind {kind!r}, expected one of {METRIC_KINDS}") from None


def _as_matrix(x, name):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 1:
        raise ValidationError(f"{name} must be an M x d matrix, got shape {x.shape}")
    return x


def _euclidean(a, b):
    aa = np.einsum("ij,ij->i", a, a)
    bb = np.einsum("ij,ij->i", b, b)
    scale = aa[:, None] + bb[None, :]
    sq = scale - 2.0 * (a @ b.T)
    np.maximum(sq, 0.0, out=sq)
    rows, cols = np.nonzero(sq <= _CANCEL_RATIO * scale)
    if rows.size:
        diff = a[rows] - b[cols]
        sq[rows, cols] = np.einsum("ij,ij->i", diff, diff)
    return np.sqrt(sq, out=sq)


def _cosine(a, b):
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    za, zb = na == 0, nb == 0
    ua = a / np.where(za, 1.0, na)[:, None]
    ub = b / np.where(zb, 1.0, nb)[:, None]
    dist = 1.0 - ua @ ub.T
    np.clip(dist, 0.0, 2.0, out=dist)
    # zero vectors sit at distance 1 from everything, themselves included
    dist[za, :] = 1.0
    dist[:, zb] = 1.0
    return dist


def pairwise_distance(a, b, kind: str = EUCLIDEAN) -> np.ndarray:
    """``D[i, j]`` between row ``i`` of ``a`` and row ``j`` of ``b``.

    ``kind`` is ``"euclidean"`` or ``"cosine"`` (one minus cosine similarity).
    """
    kind = normalize_kind(kind)
    a = _as_matrix(a, "a")
    b = _as_matrix(b, "b")
    if a.shape[1] != b.shape[1]:
        raise ValidationError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if kind == EUCLIDEAN:
        return _euclidean(a, b)
    return _cosine(a, b)


def mask_diagonal(dist) -> np.ndarray:
    """Copy of ``dist`` with ``+inf`` on the diagonal."""
    out = np.array(dist, dtype=np.float64, copy=True)
    if out.ndim != 2 or out.shape[0] != out.shape[1]:
        raise ValidationError(f"expected a square matrix, got shape {out.shape}")
    np.fill_diagonal(out, np.inf)
    return out


def topk_smallest(dist, k: int) -> np.ndarray:
    """Column indices of the ``k`` smallest entries of each row, ascending.

    Ties go to the lower column index.  Runs in roughly ``O(M^2)`` via a
    partition pass instead of a full row sort.
    """
    dist = np.asarray(dist)
    m, n = dist.shape
    if not 1 <= k <= n:
        raise ValidationError(f"k must be in [1, {n}], got {k}")
    if k == n:
        return np.argsort(dist, axis=1, kind="stable")
    kth = np.partition(dist, k - 1, axis=1)[:, k - 1]
    rows, cols = np.nonzero(dist <= kth[:, None])
    order = np.lexsort((cols, dist[rows, cols], rows))
    rows, cols = rows[order], cols[order]
    counts = np.bincount(rows, minlength=m)
    starts = np.cumsum(counts) - counts
    keep = (np.arange(rows.size) - starts[rows]) < k
    return cols[keep].reshape(m, k)


@dataclass(frozen=True)
class RerankConfig:
    """k-reciprocal re-ranking parameters; ``mode="none"`` disables it."""

    mode: str = "k-reciprocal"
    k1: int = 20
    k2: int = 6
    lam: float = 0.3

    def __post_init__(self):
        mode = {"kreciprocal": "k-reciprocal"}.get(self.mode, self.mode)
        if mode not in ("none", "k-reciprocal"):
            raise ConfigError(f"unknown rerank mode {self.mode!r}")
        object.__setattr__(self, "mode", mode)
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must be in [0, 1], got {self.lam}")
        if mode == "k-reciprocal" and not 1 <= self.k2 <= self.k1:
            raise ConfigError(f"need 1 <= k2 <= k1, got k1={self.k1}, k2={self.k2}")

    def capped(self, m: int) -> "RerankConfig":
        """Shrink ``k1``/``k2`` so they fit an ``m x m`` matrix."""
        if self.mode == "none" or self.k1 < m:
            return self
        k1 = max(m - 1, 1)
        return RerankConfig(self.mode, k1, min(self.k2, k1), self.lam)


def _neighbor_indicator(rank_top):
    m, k = rank_top.shape
    rows = np.repeat(np.arange(m), k)
    data = np.ones(rows.size, dtype=np.float64)
    return sparse.csr_matrix((data, (rows, rank_top.ravel())), shape=(m, m))


def _reciprocal(rank, k):
    """Sparse 0/1 matrix with ``R[i, j] = 1`` iff j is in i's top-k and i in j's."""
    forward = _neighbor_indicator(rank[:, :k])
    return forward.multiply(forward.T).tocsr()


def _min_overlap(v):
    """Dense ``O[i, j] = sum_k min(v[i, k], v[j, k])`` for sparse non-negative ``v``.

    Only rows sharing a column interact, so each column adds one small
    ``min``-outer block over its non-zero rows.
    """
    m = v.shape[0]
    csc = v.tocsc()
    out = np.zeros((m, m))
    indptr, indices, data = csc.indptr, csc.indices, csc.data
    for col in range(csc.shape[1]):
        lo, hi = indptr[col], indptr[col + 1]
        if hi == lo:
            continue
        rows = indices[lo:hi]
        vals = data[lo:hi]
        out[np.ix_(rows, rows)] += np.minimum.outer(vals, vals)
    return out


def rerank(dist, cfg: RerankConfig) -> np.ndarray:
    """Re-rank a square distance matrix.

    ``mode="none"`` returns ``dist`` itself.  ``mode="k-reciprocal"`` builds
    k-reciprocal neighbour sets (expanded with half-size sets that overlap by
    more than two thirds), turns them into Gaussian-weighted encodings of
    the row-normalised distances, averages each encoding over its ``k2``
    nearest rows and returns ``lam * dist + (1 - lam) * jaccard``.
    """
    if cfg.mode == "none":
        return dist
    dist = np.asarray(dist, dtype=np.float64)
    if dist.ndim != 2 or dist.shape[0] != dist.shape[1]:
        raise ValidationError(f"expected a square matrix, got shape {dist.shape}")
    m = dist.shape[0]
    if cfg.k1 >= m:
        raise ValidationError(f"k1={cfg.k1} must be smaller than the matrix size {m}")

    colmax = dist.max(axis=0)
    colmax = np.where(colmax > 0, colmax, 1.0)
    normed = (dist / colmax).T

    k_half = int(np.around(cfg.k1 / 2.0))
    rank = topk_smallest(normed, cfg.k1 + 1)
    recip = _reciprocal(rank, cfg.k1 + 1)
    recip_half = _reciprocal(rank, k_half + 1)

    overlap = (recip @ recip_half.T).tocsr()
    half_sizes = np.asarray(recip_half.sum(axis=1)).ravel()
    overlap = overlap.multiply(recip).tocoo()
    accept = overlap.data > (2.0 / 3.0) * half_sizes[overlap.col]
    chosen = sparse.csr_matrix(
        (np.ones(int(accept.sum())), (overlap.row[accept], overlap.col[accept])), shape=(m, m))
    expanded = (recip + chosen @ recip_half).tocoo()

    rows, cols = expanded.row, expanded.col
    weights = np.exp(-normed[rows, cols])
    row_sums = np.bincount(rows, weights=weights, minlength=m)
    v = sparse.csr_matrix((weights / row_sums[rows], (rows, cols)), shape=(m, m))

    if cfg.k2 != 1:
        qe_rows = np.repeat(np.arange(m), cfg.k2)
        qe = sparse.csr_matrix(
            (np.full(qe_rows.size, 1.0 / cfg.k2), (qe_rows, rank[:, :cfg.k2].ravel())),
            shape=(m, m))
        v = (qe @ v).tocsr()

    shared = _min_overlap(v)
    jaccard = 1.0 - shared / (2.0 - shared)
    np.maximum(jaccard, 0.0, out=jaccard)
    return cfg.lam * dist + (1.0 - cfg.lam) * jaccard
