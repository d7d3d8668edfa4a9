"""Epoch batch plans: graph sampling, the PK baseline and a cluster baseline.

Every plan is a :class:`BatchPlan` whose batches hold ``P`` distinct classes
with ``K`` instances each.  Instance draws are vectorised over all the
classes of an epoch, so building a plan for thousands of classes costs a
handful of numpy calls.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data import DatasetIndex
from .errors import ConfigError, ParseError, ValidationError
from .metric import topk_smallest

__all__ = [
    "SamplerConfig",
    "ClassNeighborGraph",
    "BatchPlan",
    "ClusterAssignment",
    "select_exemplars",
    "draw_instances",
    "build_class_graph",
    "gs_epoch_plan",
    "pk_epoch_plan",
    "cluster_classes",
    "cluster_epoch_plan",
    "SAMPLER_KINDS",
]

log = logging.getLogger(__name__)

SAMPLER_KINDS = ("gs", "pk", "cluster")


@dataclass(frozen=True)
class SamplerConfig:
    """Batch size ``B`` and instances per class ``K``.

    A batch holds ``P = B // K`` classes, so when ``K`` does not divide ``B``
    the realised batch has ``P * K < B`` samples.
    """

    batch_size: int = 64
    instances_per_class: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.instances_per_class < 2:
            raise ConfigError(f"K must be >= 2, got {self.instances_per_class}")
        if self.batch_size // self.instances_per_class < 2:
            raise ConfigError("need at least 2 classes per batch (B/K >= 2)")

    @property
    def K(self) -> int:
        return self.instances_per_class

    @property
    def P(self) -> int:
        return self.batch_size // self.instances_per_class

    def check_classes(self, num_classes: int):
        if self.P > num_classes:
            raise ValidationError(
                f"P={self.P} classes per batch exceeds the {num_classes} available classes")


@dataclass(frozen=True, eq=False)
class ClassNeighborGraph:
    """Row ``c`` lists the ``P-1`` nearest classes of ``c``, nearest first."""

    neighbors: np.ndarray

    def __post_init__(self):
        nb = np.asarray(self.neighbors, dtype=np.int64)
        if nb.ndim != 2 or nb.shape[1] < 1:
            raise ValidationError(f"neighbors must be C x (P-1), got shape {nb.shape}")
        C = nb.shape[0]
        if nb.min() < 0 or nb.max() >= C:
            raise ValidationError("neighbor ids out of range")
        if np.any(nb == np.arange(C)[:, None]):
            raise ValidationError("a class lists itself as a neighbour")
        srt = np.sort(nb, axis=1)
        if np.any(srt[:, 1:] == srt[:, :-1]):
            raise ValidationError("duplicate neighbour in a row")
        object.__setattr__(self, "neighbors", nb)

    @property
    def num_classes(self) -> int:
        return self.neighbors.shape[0]

    @property
    def P(self) -> int:
        return self.neighbors.shape[1] + 1


@dataclass(frozen=True, eq=False)
class BatchPlan:
    """One epoch of mini-batches.

    ``indices[b, j]`` is a sample index and ``classes[b, j]`` its class id.
    ``kind`` records which sampler produced the plan.
    """

    indices: np.ndarray
    classes: np.ndarray
    kind: str

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        cls = np.asarray(self.classes, dtype=np.int64)
        if idx.ndim != 2 or idx.shape != cls.shape:
            raise ValidationError("indices and classes must be matching 2-D arrays")
        idx.flags.writeable = False
        cls.flags.writeable = False
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "classes", cls)

    def __len__(self):
        return self.indices.shape[0]

    def batch(self, b):
        return list(zip(self.indices[b].tolist(), self.classes[b].tolist()))

    def __iter__(self):
        for b in range(len(self)):
            yield self.batch(b)

    def dumps(self) -> str:
        lines = []
        for b in range(len(self)):
            pairs = " ".join(f"({i}:{c})" for i, c in zip(self.indices[b], self.classes[b]))
            lines.append(f"{b}: {pairs}")
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def loads(cls, text: str, kind: str = "unknown") -> "BatchPlan":
        indices, classes = [], []
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            head, _, body = line.partition(":")
            if not head.strip().isdigit():
                raise ParseError("expected '<batch_id>: (idx:class) ...'", lineno)
            row_i, row_c = [], []
            for tok in body.split():
                if not (tok.startswith("(") and tok.endswith(")")):
                    raise ParseError(f"bad pair {tok!r}", lineno)
                i, _, c = tok[1:-1].partition(":")
                row_i.append(int(i))
                row_c.append(int(c))
            indices.append(row_i)
            classes.append(row_c)
        return cls(np.array(indices, dtype=np.int64).reshape(len(indices), -1),
                   np.array(classes, dtype=np.int64).reshape(len(classes), -1), kind)

    def check(self, index: DatasetIndex, P: int, K: int):
        """Raise if any batch breaks the P-classes-by-K-instances contract."""
        if self.indices.shape[1] != P * K:
            raise ValidationError(f"batch width {self.indices.shape[1]} != P*K = {P * K}")
        labels = np.empty(index.num_samples, dtype=np.int64)
        for c, members in index.index_dict.items():
            labels[members] = c
        if self.indices.size and (self.indices.min() < 0
                                  or self.indices.max() >= index.num_samples):
            raise ValidationError("sample index out of range")
        if not np.array_equal(labels[self.indices], self.classes):
            raise ValidationError("class column disagrees with the dataset labels")
        for b in range(len(self)):
            _, counts = np.unique(self.classes[b], return_counts=True)
            if counts.size != P or np.any(counts != K):
                raise ValidationError(f"batch {b} is not {P} classes x {K} instances")


def _choose_distinct(high, k, rng):
    """Row-wise draws of ``k`` distinct integers from ``[0, high[r])``.

    Each row is a uniformly random ordered ``k``-subset.  Draw ``t`` picks
    uniformly among ``high - t`` slots and then steps over the values
    already taken, in ascending order.
    """
    high = np.asarray(high, dtype=np.int64)
    out = np.empty((high.size, k), dtype=np.int64)
    for t in range(k):
        r = rng.integers(0, np.maximum(high - t, 1))
        if t:
            taken = np.sort(out[:, :t], axis=1)
            for s in range(t):
                r += r >= taken[:, s]
        out[:, t] = r
    return out


def draw_instances(index: DatasetIndex, class_ids, k: int, rng) -> np.ndarray:
    """``k`` sample indices for each class in ``class_ids`` (shape ``(n, k)``).

    Without replacement for classes holding at least ``k`` samples, with
    replacement for the rest.
    """
    class_ids = np.asarray(class_ids, dtype=np.int64)
    sizes = index.sizes[class_ids]
    picks = _choose_distinct(sizes, k, rng)
    small = sizes < k
    if small.any():
        picks[small] = rng.integers(0, sizes[small][:, None], size=(int(small.sum()), k))
    return index.flat[index.offsets[class_ids][:, None] + picks]


def select_exemplars(index: DatasetIndex, seed) -> np.ndarray:
    """One uniformly chosen sample index per class, in ``pids`` order."""
    rng = np.random.default_rng(seed)
    pids = np.asarray(index.pids, dtype=np.int64)
    offs = rng.integers(0, index.sizes[pids])
    return index.flat[index.offsets[pids] + offs]


def build_class_graph(dist, P: int) -> ClassNeighborGraph:
    """Top ``P-1`` nearest classes per row of a diagonal-masked distance matrix.

    Ties go to the lower class id.
    """
    dist = np.asarray(dist, dtype=np.float64)
    if dist.ndim != 2 or dist.shape[0] != dist.shape[1]:
        raise ValidationError(f"expected a square matrix, got shape {dist.shape}")
    C = dist.shape[0]
    if not 2 <= P <= C:
        raise ValidationError(f"P must be in [2, C={C}], got {P}")
    if np.isnan(dist).any():
        raise ValidationError("distance matrix contains NaN")
    if not np.all(np.isposinf(np.diagonal(dist))):
        dist = dist.copy()
        np.fill_diagonal(dist, np.inf)
    near = topk_smallest(dist, P)
    # the masked diagonal can only surface when a row is all +inf
    neighbors = np.empty((C, P - 1), dtype=np.int64)
    for c in np.flatnonzero(np.any(near == np.arange(C)[:, None], axis=1)):
        row = near[c][near[c] != c]
        near[c, : P - 1] = row[: P - 1]
    neighbors[:] = near[:, : P - 1]
    return ClassNeighborGraph(neighbors)


def _assemble(class_mat, index, K, rng, kind):
    nb, P = class_mat.shape
    draws = draw_instances(index, class_mat.ravel(), K, rng)
    small = int(np.count_nonzero(index.sizes[class_mat.ravel()] < K))
    if small:
        log.info("%s plan: %d class draws used replacement (class size < K=%d)", kind, small, K)
    return BatchPlan(draws.reshape(nb, P * K), np.repeat(class_mat, K, axis=1), kind)


def gs_epoch_plan(graph: ClassNeighborGraph, index: DatasetIndex, cfg: SamplerConfig,
                  seed=None) -> BatchPlan:
    """One batch per class: the class followed by its graph neighbours.

    Centres are visited in a seeded shuffle of ``pids``; the epoch length is
    always ``C``.  ``seed`` defaults to ``cfg.seed``.
    """
    if graph.num_classes != index.num_classes:
        raise ValidationError(
            f"graph has {graph.num_classes} classes, index has {index.num_classes}")
    if graph.P != cfg.P:
        raise ValidationError(f"graph was built for P={graph.P}, config has P={cfg.P}")
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    centers = rng.permutation(np.asarray(index.pids, dtype=np.int64))
    class_mat = np.concatenate([centers[:, None], graph.neighbors[centers]], axis=1)
    return _assemble(class_mat, index, cfg.K, rng, "gs")


def default_num_batches(index: DatasetIndex, cfg: SamplerConfig) -> int:
    """``ceil(N / B)``: one pass over the data's worth of samples."""
    return -(-index.num_samples // cfg.batch_size)


def pk_epoch_plan(index: DatasetIndex, cfg: SamplerConfig, num_batches: int,
                  seed=None) -> BatchPlan:
    """``num_batches`` batches of ``P`` uniformly drawn classes, ``K`` samples each."""
    cfg.check_classes(index.num_classes)
    if num_batches < 0:
        raise ConfigError("num_batches must be >= 0")
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    pids = np.asarray(index.pids, dtype=np.int64)
    picks = _choose_distinct(np.full(num_batches, len(pids)), cfg.P, rng)
    return _assemble(pids[picks].reshape(num_batches, cfg.P), index, cfg.K, rng, "pk")


@dataclass(frozen=True, eq=False)
class ClusterAssignment:
    labels: np.ndarray
    centers: np.ndarray
    n_iter: int = 0

    @property
    def num_clusters(self) -> int:
        return self.centers.shape[0]


def _sq_dist(x, centers):
    d = (np.einsum("ij,ij->i", x, x)[:, None]
         + np.einsum("ij,ij->i", centers, centers)[None, :]
         - 2.0 * x @ centers.T)
    return np.maximum(d, 0.0)


def _kmeans_pp(x, m, rng):
    n = x.shape[0]
    centers = np.empty((m, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = _sq_dist(x, centers[:1]).ravel()
    for j in range(1, m):
        total = closest.sum()
        if total > 0:
            pick = rng.choice(n, p=closest / total)
        else:
            pick = rng.integers(n)
        centers[j] = x[pick]
        np.minimum(closest, _sq_dist(x, centers[j:j + 1]).ravel(), out=closest)
    return centers


def cluster_classes(embeddings, M: int, seed, max_iter: int = 100,
                    tol: float = 1e-6) -> ClusterAssignment:
    """k-means over class representations with seeded k-means++ seeding.

    Stops after ``max_iter`` Lloyd steps or once no centre moves more than
    ``tol``.  An empty cluster is re-seeded with the point farthest from its
    current centre.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    C = x.shape[0]
    if not 1 <= M <= C:
        raise ValidationError(f"cluster count M must be in [1, C={C}], got {M}")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(x, M, rng)
    labels = np.argmin(_sq_dist(x, centers), axis=1)
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        counts = np.bincount(labels, minlength=M)
        new = np.zeros_like(centers)
        np.add.at(new, labels, x)
        nonempty = counts > 0
        new[nonempty] /= counts[nonempty, None]
        if not nonempty.all():
            far = np.sum((x - centers[labels]) ** 2, axis=1)
            for j in np.flatnonzero(~nonempty):
                p = int(np.argmax(far))
                new[j] = x[p]
                far[p] = -1.0
        shift = np.sqrt(np.max(np.sum((new - centers) ** 2, axis=1)))
        centers = new
        labels = np.argmin(_sq_dist(x, centers), axis=1)
        if shift <= tol:
            break
    return ClusterAssignment(labels, centers, n_iter)


def _merge_small_clusters(assignment: ClusterAssignment, P: int):
    members = {j: list(np.flatnonzero(assignment.labels == j)) for j in
               range(assignment.num_clusters)}
    members = {j: m for j, m in members.items() if m}
    centers = {j: assignment.centers[j].copy() for j in members}
    while len(members) > 1:
        small = [j for j in sorted(members) if len(members[j]) < P]
        if not small:
            break
        j = min(small, key=lambda c: (len(members[c]), c))
        others = [o for o in sorted(members) if o != j]
        gaps = [float(np.sum((centers[o] - centers[j]) ** 2)) for o in others]
        target = others[int(np.argmin(gaps))]
        nj, nt = len(members[j]), len(members[target])
        centers[target] = (centers[target] * nt + centers[j] * nj) / (nt + nj)
        members[target] = sorted(members[target] + members.pop(j))
        del centers[j]
    groups = [np.asarray(members[j], dtype=np.int64) for j in sorted(members)]
    if all(g.size < P for g in groups):
        raise ValidationError(f"no cluster holds P={P} classes even after merging")
    return groups


def _proportional_quotas(sizes, total):
    sizes = np.asarray(sizes, dtype=np.float64)
    exact = total * sizes / sizes.sum()
    quotas = np.floor(exact).astype(np.int64)
    short = total - int(quotas.sum())
    if short:
        order = np.lexsort((np.arange(sizes.size), -(exact - quotas)))
        quotas[order[:short]] += 1
    return quotas


def cluster_epoch_plan(assignment: ClusterAssignment, index: DatasetIndex, cfg: SamplerConfig,
                       num_batches: int, seed=None) -> BatchPlan:
    """PK-style batches whose ``P`` classes all come from one cluster.

    Clusters with fewer than ``P`` classes are first merged into the cluster
    with the nearest centroid.  Each cluster sources a share of the batches
    proportional to its class count; the order of clusters is shuffled.
    """
    if assignment.labels.size != index.num_classes:
        raise ValidationError("assignment does not cover the indexed classes")
    cfg.check_classes(index.num_classes)
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    groups = _merge_small_clusters(assignment, cfg.P)
    quotas = _proportional_quotas([g.size for g in groups], num_batches)
    schedule = np.repeat(np.arange(len(groups)), quotas)
    rng.shuffle(schedule)
    group_sizes = np.array([g.size for g in groups])
    picks = _choose_distinct(group_sizes[schedule], cfg.P, rng)
    pids = np.asarray(index.pids, dtype=np.int64)
    class_mat = np.empty((num_batches, cfg.P), dtype=np.int64)
    for b, g in enumerate(schedule):
        class_mat[b] = pids[groups[g][picks[b]]]
    return _assemble(class_mat, index, cfg.K, rng, "cluster")
