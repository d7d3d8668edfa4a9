"""Training loop: per-epoch plan construction, triplet loss, clipping and SGD."""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import LabeledFeatureSet, build_index
from .errors import ConfigError, TrainingAborted, ValidationError
from .evaluation import EvalSplit, evaluate
from .loss import LossConfig, batch_hard_triplet
from .metric import (EUCLIDEAN, RerankConfig, mask_diagonal, normalize_kind,
                     pairwise_distance, rerank)
from .model import EmbeddingModel
from .samplers import (SAMPLER_KINDS, SamplerConfig, build_class_graph, cluster_classes,
                       cluster_epoch_plan, default_num_batches, gs_epoch_plan, pk_epoch_plan,
                       select_exemplars)

__all__ = [
    "TrainConfig",
    "MetricsLog",
    "loss_and_grad",
    "clip_gradient",
    "learning_rate",
    "sgd_step",
    "build_epoch_plan",
    "train",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    decay_factor: float = 0.1
    decay_epoch: int = 10
    total_epochs: int = 15
    clip: Optional[float] = 8.0
    seed: int = 0
    eval_mode_exemplars: bool = True
    metric: str = EUCLIDEAN
    rerank: RerankConfig = field(default_factory=RerankConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    # baselines: batches per epoch (None -> ceil(N/B), or C with match_gs_iters)
    num_batches: Optional[int] = None
    match_gs_iters: bool = False
    num_clusters: int = 10
    # embedding model
    model_kind: str = "linear"
    embed_dim: int = 32
    hidden_dim: int = 64
    bias: bool = False
    l2_normalize: bool = False

    def __post_init__(self):
        object.__setattr__(self, "metric", normalize_kind(self.metric))
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not 0 < self.decay_factor <= 1:
            raise ConfigError(f"decay_factor must be in (0, 1], got {self.decay_factor}")
        if self.total_epochs < 0:
            raise ConfigError("total_epochs must be >= 0")
        if not 0 <= self.decay_epoch <= self.total_epochs:
            raise ConfigError(
                f"decay_epoch={self.decay_epoch} must be in [0, total_epochs={self.total_epochs}]")
        if self.clip is not None and not (math.isfinite(self.clip) and self.clip > 0):
            raise ConfigError(f"clip threshold must be > 0 (or None to disable), got {self.clip}")
        if self.num_batches is not None and self.num_batches < 1:
            raise ConfigError("num_batches must be >= 1")
        if self.num_clusters < 1:
            raise ConfigError("num_clusters must be >= 1")

    def make_model(self, d_in: int) -> EmbeddingModel:
        return EmbeddingModel.initialize(self.model_kind, d_in, self.embed_dim, self.hidden_dim,
                                         self.bias, self.l2_normalize, seed=[self.seed, 0])


ITER_COLUMNS = ("epoch", "iter", "step", "loss_sum", "loss_mean", "active_fraction",
                "grad_norm_preclip", "clipped")
EPOCH_COLUMNS = ("epoch", "iterations", "plan_build_seconds", "train_seconds", "wall_time")
CURVE_COLUMNS = ("epoch", "step", "rank1", "map")


@dataclass
class MetricsLog:
    """Per-iteration rows, per-epoch timing rows and held-out evaluation rows.

    Iteration and curve rows are deterministic given the config and seed;
    timing rows are not, so they serialise to a separate CSV.
    """

    iterations: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    curve: list = field(default_factory=list)

    def iterations_in_epoch(self, epoch):
        return sum(1 for row in self.iterations if row[0] == epoch)

    def epoch_active_fraction(self, epoch):
        rows = [row[5] for row in self.iterations if row[0] == epoch]
        return float(np.mean(rows)) if rows else float("nan")

    def epoch_mean_loss(self, epoch):
        rows = [row[4] for row in self.iterations if row[0] == epoch]
        return float(np.mean(rows)) if rows else float("nan")

    def steps_to_map(self, target):
        """First evaluated step whose held-out mAP reaches ``target`` (None if never)."""
        for _, step, _, m in self.curve:
            if m >= target:
                return step
        return None

    @staticmethod
    def _write(fh, columns, rows):
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else int(v) if isinstance(v, bool)
                             else v for v in row])

    def write_iterations(self, fh):
        self._write(fh, ITER_COLUMNS, self.iterations)

    def write_epochs(self, fh):
        self._write(fh, EPOCH_COLUMNS, self.epochs)

    def write_curve(self, fh):
        self._write(fh, CURVE_COLUMNS, self.curve)

    @staticmethod
    def read_iterations(fh):
        if isinstance(fh, str):
            fh = io.StringIO(fh)
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != ITER_COLUMNS:
            raise ValidationError(f"unexpected metrics columns {header}")
        return [(int(r[0]), int(r[1]), int(r[2]), float(r[3]), float(r[4]), float(r[5]),
                 float(r[6]), r[7] == "1") for r in reader]


def _distance_grad(emb, dist, grad_dist, kind):
    """Back-propagate ``d loss / d D`` to the embeddings ``emb``."""
    if kind == EUCLIDEAN:
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(dist > 0, grad_dist / dist, 0.0)
        return (w.sum(axis=1)[:, None] * emb - w @ emb
                + w.sum(axis=0)[:, None] * emb - w.T @ emb)
    norms = np.linalg.norm(emb, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = emb / safe[:, None]
    cos = unit @ unit.T
    # D = 1 - cos; d cos(a, b) / d e_a = (u_b - cos * u_a) / |e_a|
    w = -grad_dist
    w = np.where((norms[:, None] > 0) & (norms[None, :] > 0), w, 0.0)
    g = (w @ unit - (w * cos).sum(axis=1)[:, None] * unit) / safe[:, None]
    g += (w.T @ unit - (w * cos).sum(axis=0)[:, None] * unit) / safe[:, None]
    g[norms == 0] = 0.0
    return g


def loss_and_grad(model: EmbeddingModel, features, labels, metric: str = EUCLIDEAN,
                  loss_cfg=LossConfig()):
    """Triplet loss of one batch and its gradient w.r.t. every model parameter.

    Similarity is ``-distance``.  A Euclidean pair at distance zero
    contributes a zero subgradient.
    """
    kind = normalize_kind(metric)
    # overflow here is reported below as a training abort, not as a warning
    with np.errstate(over="ignore", invalid="ignore"):
        emb, cache = model.forward_with_cache(features)
        dist = pairwise_distance(emb, emb, kind)
    if not np.all(np.isfinite(dist)):
        raise TrainingAborted("non-finite embedding distances",
                              {"embedding_max_abs": float(np.max(np.abs(emb)))})
    out = batch_hard_triplet(-dist, labels, loss_cfg)
    if out.active_count == 0:
        return out, np.zeros(model.num_params)
    grad_emb = _distance_grad(emb, dist, -out.grad_similarity, kind)
    return out, model.backward(cache, grad_emb)


def clip_gradient(g, threshold) -> np.ndarray:
    """Scale ``g`` by ``min(1, threshold / |g|)``; ``threshold=None`` only checks finiteness."""
    if threshold is not None and not threshold > 0:
        raise ConfigError(f"clip threshold must be > 0, got {threshold}")
    g = np.asarray(g, dtype=np.float64)
    norm = float(np.linalg.norm(g))
    if not math.isfinite(norm):
        raise TrainingAborted("non-finite gradient", {"grad_norm": norm})
    if threshold is None or norm <= threshold:
        return g
    return g * (threshold / norm)


def learning_rate(epoch: int, cfg: TrainConfig) -> float:
    return cfg.lr * cfg.decay_factor if epoch >= cfg.decay_epoch else cfg.lr


def sgd_step(model: EmbeddingModel, g, epoch: int, cfg: TrainConfig) -> EmbeddingModel:
    """In-place ``theta -= lr(epoch) * g``; returns ``model``."""
    g = np.asarray(g, dtype=np.float64)
    if g.shape != model.params.shape:
        raise ValidationError(f"gradient shape {g.shape} != parameter shape {model.params.shape}")
    model.params -= learning_rate(epoch, cfg) * g
    return model


def _class_means(emb, labels, num_classes):
    sums = np.zeros((num_classes, emb.shape[1]))
    np.add.at(sums, labels, emb)
    return sums / np.bincount(labels, minlength=num_classes)[:, None]


def build_epoch_plan(kind, model, dataset: LabeledFeatureSet, index, cfg: TrainConfig, rng):
    """Plan one epoch with ``kind`` in ``{"gs", "pk", "cluster"}``.

    The model is only read here; the graph sampler embeds one exemplar per
    class with the current parameters.
    """
    scfg = cfg.sampler
    C = index.num_classes
    if kind == "gs":
        exemplars = select_exemplars(index, rng)
        emb = model.forward(dataset.features[exemplars])
        dist = pairwise_distance(emb, emb, cfg.metric)
        dist = rerank(dist, cfg.rerank.capped(C))
        graph = build_class_graph(mask_diagonal(dist), scfg.P)
        return gs_epoch_plan(graph, index, scfg, rng)
    if cfg.num_batches is not None:
        num_batches = cfg.num_batches
    elif cfg.match_gs_iters:
        num_batches = C
    else:
        num_batches = default_num_batches(index, scfg)
    if kind == "pk":
        return pk_epoch_plan(index, scfg, num_batches, rng)
    if kind == "cluster":
        means = _class_means(model.forward(dataset.features), dataset.labels, C)
        assignment = cluster_classes(means, min(cfg.num_clusters, C), rng)
        return cluster_epoch_plan(assignment, index, scfg, num_batches, rng)
    raise ConfigError(f"unknown sampler {kind!r}, expected one of {SAMPLER_KINDS}")


def train(dataset: LabeledFeatureSet, cfg: TrainConfig, sampler_kind: str = "gs",
          model: Optional[EmbeddingModel] = None, eval_split: Optional[EvalSplit] = None,
          eval_every: Optional[int] = None):
    """Train an embedding model; returns ``(model, MetricsLog)``.

    With ``eval_split`` the held-out split is scored before the first step,
    every ``eval_every`` optimizer steps and at the end of each epoch.
    """
    if sampler_kind not in SAMPLER_KINDS:
        raise ConfigError(f"unknown sampler {sampler_kind!r}, expected one of {SAMPLER_KINDS}")
    index = build_index(dataset)
    cfg.sampler.check_classes(index.num_classes)
    if model is None:
        model = cfg.make_model(dataset.dim)
    elif model.d_in != dataset.dim:
        raise ValidationError(f"model expects d_in={model.d_in}, data has {dataset.dim}")
    metrics = MetricsLog()
    rng = np.random.default_rng([cfg.seed, 1])
    step = 0

    def record_eval(epoch):
        if eval_split is not None:
            report = evaluate(model.copy(), eval_split, cfg.metric)
            if not metrics.curve or metrics.curve[-1][1] != step:
                metrics.curve.append((epoch, step, report.rank1, report.map))

    if cfg.total_epochs > 0:
        record_eval(0)
    for epoch in range(cfg.total_epochs):
        t0 = time.perf_counter()
        plan = build_epoch_plan(sampler_kind, model, dataset, index, cfg, rng)
        t1 = time.perf_counter()
        eval_seconds = 0.0
        for it in range(len(plan)):
            batch_idx = plan.indices[it]
            try:
                out, g = loss_and_grad(model, dataset.features[batch_idx], plan.classes[it],
                                       cfg.metric, cfg.loss)
                if not math.isfinite(out.value):
                    raise TrainingAborted("non-finite loss", {"loss": out.value})
                clipped_g = clip_gradient(g, cfg.clip)
            except TrainingAborted as exc:
                exc.state.update(epoch=epoch, iter=it, step=step, batch=batch_idx.tolist(),
                                 param_norm=float(np.linalg.norm(model.params)))
                raise
            norm = float(np.linalg.norm(g))
            sgd_step(model, clipped_g, epoch, cfg)
            step += 1
            metrics.iterations.append((epoch, it, step, out.value, out.mean, out.active_fraction,
                                       norm, clipped_g is not g))
            if eval_every and step % eval_every == 0:
                te = time.perf_counter()
                record_eval(epoch)
                eval_seconds += time.perf_counter() - te
        t2 = time.perf_counter()
        record_eval(epoch)
        metrics.epochs.append((epoch, len(plan), t1 - t0, t2 - t1 - eval_seconds, time.time()))
        log.info("epoch %d: %d iters, mean loss %.4f, active %.3f, plan %.3fs, train %.3fs",
                 epoch, len(plan), metrics.epoch_mean_loss(epoch),
                 metrics.epoch_active_fraction(epoch), t1 - t0, t2 - t1 - eval_seconds)
    return model, metrics
