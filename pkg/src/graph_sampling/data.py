"""Synthetic labelled feature sets, class indexing and the feature-file format.

The generator builds a two-level Gaussian world: classes are attached
round-robin to a handful of group centres, so classes sharing a group are
each other's hard negatives.  That is the structure the graph sampler is
meant to discover.
"""
from __future__ import annotations

import dataclasses
import math
import os
import re
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, ParseError, ValidationError

__all__ = [
    "LabeledFeatureSet",
    "DatasetIndex",
    "SyntheticConfig",
    "generate_synthetic",
    "generate_train_test",
    "build_index",
    "save_featureset",
    "load_featureset",
    "featureset_digest",
]


def _check_labels(labels: np.ndarray) -> int:
    """Validate a contiguous label vector and return the class count."""
    if labels.ndim != 1:
        raise ValidationError("labels must be one-dimensional")
    if labels.size == 0:
        raise ValidationError("empty label vector")
    if labels.min() < 0:
        raise ValidationError("labels must be non-negative")
    counts = np.bincount(labels)
    if np.any(counts == 0):
        missing = np.flatnonzero(counts == 0)[:5].tolist()
        raise ValidationError(f"labels are not contiguous, missing class ids {missing}")
    if counts.size < 2:
        raise ValidationError(f"need at least 2 classes, got {counts.size}")
    return int(counts.size)


def _as_label_array(labels) -> np.ndarray:
    arr = np.asarray(labels)
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        as_int = arr.astype(np.int64)
        if not np.array_equal(as_int, arr):
            raise ValidationError("labels must be integers")
        arr = as_int
    return arr.astype(np.int64, copy=False).reshape(-1)


@dataclass(frozen=True, eq=False)
class LabeledFeatureSet:
    """N raw feature vectors with contiguous class labels in ``[0, C-1]``.

    ``original_ids`` maps a contiguous label back to the id it had on disk
    (or in the parent world, for generated splits); it is kept for reporting
    only.
    """

    features: np.ndarray
    labels: np.ndarray
    original_ids: Optional[tuple] = None

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[1] < 1:
            raise ValidationError(f"features must be an N x d matrix, got shape {feats.shape}")
        labels = _as_label_array(self.labels)
        if labels.shape[0] != feats.shape[0]:
            raise ValidationError(
                f"{feats.shape[0]} feature rows but {labels.shape[0]} labels")
        if not np.all(np.isfinite(feats)):
            raise ValidationError("features contain non-finite values")
        num_classes = _check_labels(labels)
        if self.original_ids is not None and len(self.original_ids) != num_classes:
            raise ValidationError("original_ids length does not match the class count")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.features.shape[0]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "LabeledFeatureSet":
        """Rows ``indices``, with labels re-numbered to stay contiguous."""
        indices = np.asarray(indices, dtype=np.int64)
        sub_labels = self.labels[indices]
        kept, relabeled = np.unique(sub_labels, return_inverse=True)
        ids = self.original_ids
        orig = tuple(ids[k] for k in kept) if ids is not None else tuple(int(k) for k in kept)
        return LabeledFeatureSet(self.features[indices], relabeled, orig)


@dataclass(frozen=True, eq=False)
class DatasetIndex:
    """Class ids and per-class sample lists.

    Besides the ``pids``/``index_dict`` pair, the index keeps a flat layout
    (``flat`` sorted by class, with ``offsets``/``sizes``) so samplers can
    draw instances for thousands of classes without a Python loop.
    """

    pids: list
    index_dict: dict
    flat: np.ndarray = field(repr=False)
    offsets: np.ndarray = field(repr=False)
    sizes: np.ndarray = field(repr=False)

    @property
    def num_classes(self) -> int:
        return len(self.pids)

    @property
    def num_samples(self) -> int:
        return int(self.flat.size)


def build_index(data) -> DatasetIndex:
    """Index a :class:`LabeledFeatureSet` (or a bare label sequence) by class."""
    labels = data.labels if isinstance(data, LabeledFeatureSet) else _as_label_array(data)
    num_classes = _check_labels(labels)
    order = np.argsort(labels, kind="stable")
    sizes = np.bincount(labels, minlength=num_classes)
    offsets = np.zeros(num_classes, dtype=np.int64)
    np.cumsum(sizes[:-1], out=offsets[1:])
    index_dict = {c: order[offsets[c]:offsets[c] + sizes[c]] for c in range(num_classes)}
    return DatasetIndex(
        pids=list(range(num_classes)),
        index_dict=index_dict,
        flat=order,
        offsets=offsets,
        sizes=sizes.astype(np.int64),
    )


@dataclass(frozen=True)
class SyntheticConfig:
    """Parameters of the two-level Gaussian world.

    ``signal_dim`` restricts group and class centres to the first
    ``signal_dim`` coordinates while within-class noise stays isotropic over
    all ``ambient_dim`` coordinates; ``None`` uses every coordinate.
    """

    num_classes: int = 64
    samples_per_class_min: int = 6
    samples_per_class_max: int = 6
    ambient_dim: int = 32
    num_groups: int = 8
    group_center_scale: float = 4.0
    class_center_scale: float = 1.0
    within_class_sigma: float = 0.5
    seed: int = 0
    signal_dim: Optional[int] = None

    def validate(self):
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if not 1 <= self.num_groups <= self.num_classes:
            raise ConfigError(
                f"num_groups must be in [1, num_classes={self.num_classes}], got {self.num_groups}")
        if self.samples_per_class_min < 1:
            raise ConfigError("samples_per_class_min must be >= 1")
        if self.samples_per_class_max < self.samples_per_class_min:
            raise ConfigError("samples_per_class_max must be >= samples_per_class_min")
        if self.ambient_dim < 1:
            raise ConfigError("ambient_dim must be >= 1")
        if self.signal_dim is not None and not 1 <= self.signal_dim <= self.ambient_dim:
            raise ConfigError("signal_dim must be in [1, ambient_dim]")
        for name in ("group_center_scale", "class_center_scale", "within_class_sigma"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ConfigError(f"{name} must be finite and >= 0, got {value}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit non-negative integer")


def _draw_world(cfg: SyntheticConfig):
    rng = np.random.default_rng(cfg.seed)
    d, C = cfg.ambient_dim, cfg.num_classes
    sd = d if cfg.signal_dim is None else cfg.signal_dim
    groups = np.zeros((cfg.num_groups, d))
    groups[:, :sd] = rng.standard_normal((cfg.num_groups, sd)) * cfg.group_center_scale
    class_group = np.arange(C) % cfg.num_groups
    centers = groups[class_group].copy()
    centers[:, :sd] += rng.standard_normal((C, sd)) * cfg.class_center_scale
    counts = rng.integers(cfg.samples_per_class_min, cfg.samples_per_class_max + 1, size=C)
    labels = np.repeat(np.arange(C), counts)
    noise = rng.standard_normal((labels.size, d)) * cfg.within_class_sigma
    features = centers[labels] + noise
    return features, labels, centers, class_group


def generate_synthetic(cfg: SyntheticConfig) -> LabeledFeatureSet:
    """Draw a labelled feature set; a pure function of ``cfg``."""
    cfg.validate()
    features, labels, _, _ = _draw_world(cfg)
    return LabeledFeatureSet(features, labels)


def class_centers(cfg: SyntheticConfig):
    """Noise-free class centres and their group ids, for diagnostics and tests."""
    cfg.validate()
    _, _, centers, class_group = _draw_world(cfg)
    return centers, class_group


def generate_train_test(cfg: SyntheticConfig, num_test_classes: int):
    """Draw ``cfg.num_classes`` training classes plus held-out classes from one world.

    Both sets share the group centres; the held-out classes are the ids
    ``>= cfg.num_classes`` of a world with ``num_classes + num_test_classes``
    classes, so round-robin group assignment covers every group in both.
    """
    if num_test_classes < 2:
        raise ConfigError("num_test_classes must be >= 2")
    world = dataclasses.replace(cfg, num_classes=cfg.num_classes + num_test_classes)
    full = generate_synthetic(world)
    is_train = full.labels < cfg.num_classes
    train = full.subset(np.flatnonzero(is_train))
    test = full.subset(np.flatnonzero(~is_train))
    return train, test


def featureset_digest(fs: LabeledFeatureSet) -> str:
    """SHA-256 over labels and feature bytes; used to prove runs share inputs."""
    import hashlib

    h = hashlib.sha256()
    h.update(np.ascontiguousarray(fs.labels, dtype="<i8").tobytes())
    h.update(np.ascontiguousarray(fs.features, dtype="<f8").tobytes())
    return h.hexdigest()


# Feature file: "label,v0,...,v{d-1}" per line, optional "# d_in=.. C=.. N=.." header.

_HEADER_RE = re.compile(r"(\w+)=(\S+)")


def save_featureset(fs: LabeledFeatureSet, path) -> None:
    ids = fs.original_ids
    out_labels = fs.labels if ids is None else np.asarray(ids, dtype=np.int64)[fs.labels]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# d_in={fs.dim} C={fs.num_classes} N={len(fs)}\n")
        for label, row in zip(out_labels.tolist(), fs.features.tolist()):
            fh.write(str(label))
            for v in row:
                fh.write(f",{v:.16e}")
            fh.write("\n")


def load_featureset(path) -> LabeledFeatureSet:
    """Parse a feature file; labels are renumbered to ``[0, C-1]`` in id order."""
    path = os.fspath(path)
    header = {}
    raw_labels = []
    rows = []
    dim = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if not rows and not header:
                    header = {k: v for k, v in _HEADER_RE.findall(line)}
                continue
            parts = line.split(",")
            if len(parts) < 2:
                raise ParseError("expected 'label,v0,...'", lineno, path)
            label_text = parts[0].strip()
            if not label_text.isdigit():
                raise ParseError(f"label {label_text!r} is not a non-negative integer", lineno, path)
            if dim is None:
                dim = len(parts) - 1
            elif len(parts) - 1 != dim:
                raise ParseError(f"expected {dim} values, found {len(parts) - 1}", lineno, path)
            try:
                values = [float(p) for p in parts[1:]]
            except ValueError as exc:
                raise ParseError(f"bad value: {exc}", lineno, path) from None
            if not all(math.isfinite(v) for v in values):
                raise ParseError("non-finite value", lineno, path)
            raw_labels.append(int(label_text))
            rows.append(values)
    if not rows:
        raise ValidationError(f"{path}: no samples in feature file")
    if "d_in" in header and int(header["d_in"]) != dim:
        raise ParseError(f"header declares d_in={header['d_in']} but rows have {dim} values",
                         1, path)
    ids, labels = np.unique(np.asarray(raw_labels, dtype=np.int64), return_inverse=True)
    return LabeledFeatureSet(np.asarray(rows, dtype=np.float64), labels,
                             tuple(int(i) for i in ids))
