"""Synthetic datasets, non-IID partitioning and mini-batch sampling."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model_core import Batch


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        if len(self.labels) == 0:
            raise ValueError("dataset is empty")
        if self.features.shape[0] != len(self.labels):
            raise ValueError("features and labels disagree on sample count")
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise ValueError("labels outside [0, n_classes)")

    def __len__(self):
        return len(self.labels)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.n_classes)

    def as_batch(self) -> Batch:
        return Batch(self.features, self.labels)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)


@dataclass(frozen=True)
class PartitionSpec:
    n_devices: int
    beta: float
    seed: int
    max_retries: int = 1000

    def __post_init__(self):
        if self.n_devices < 1:
            raise ValueError("n_devices must be >= 1")
        if not self.beta > 0:
            raise ValueError("beta must be > 0")


def generate_synthetic(
    n_classes: int, feature_dim: int, n_samples: int, class_sep: float, seed
) -> Dataset:
    """Balanced Gaussian class clusters with pairwise mean distance ``class_sep``.

    Class means are ``class_sep / sqrt(2)`` times orthonormal directions when
    ``feature_dim >= n_classes``; otherwise random unit directions are used and
    the pairwise distance only approximates ``class_sep``. Noise is N(0, I).
    """
    if n_classes < 2 or feature_dim < 1 or n_samples < 1:
        raise ValueError("n_classes >= 2, feature_dim >= 1 and n_samples >= 1 required")
    if n_samples < n_classes:
        raise ValueError("need at least one sample per class")
    rng = np.random.default_rng(seed)
    if feature_dim >= n_classes:
        q, _ = np.linalg.qr(rng.standard_normal((feature_dim, n_classes)))
        dirs = q.T
    else:
        dirs = rng.standard_normal((n_classes, feature_dim))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    means = class_sep / np.sqrt(2.0) * dirs
    labels = np.arange(n_samples) % n_classes
    rng.shuffle(labels)
    features = means[labels] + rng.standard_normal((n_samples, feature_dim))
    return Dataset(features, labels.astype(np.int64), n_classes)


def train_test_split(ds: Dataset, test_fraction: float, seed) -> tuple[Dataset, Dataset]:
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ds))
    n_test = max(1, int(round(test_fraction * len(ds))))
    if n_test >= len(ds):
        raise ValueError("dataset too small to split")
    return ds.subset(np.sort(perm[n_test:])), ds.subset(np.sort(perm[:n_test]))


def _dirichlet_draw(labels: np.ndarray, n_classes: int, n_devices: int, beta: float, rng):
    shards = [[] for _ in range(n_devices)]
    for c in range(n_classes):
        idx = np.flatnonzero(labels == c)
        if len(idx) == 0:
            continue
        rng.shuffle(idx)
        props = rng.dirichlet(np.full(n_devices, beta))
        cuts = (np.cumsum(props) * len(idx)).astype(int)[:-1]
        for n, part in enumerate(np.split(idx, cuts)):
            shards[n].extend(part.tolist())
    return shards


def dirichlet_partition(ds: Dataset, spec: PartitionSpec) -> list[Dataset]:
    """Split ``ds`` across devices with per-class Dirichlet(beta) proportions.

    A draw leaving any device empty is discarded and redrawn with the next
    sub-seed; after ``spec.max_retries`` failures a RuntimeError is raised.
    """
    if len(ds) < spec.n_devices:
        raise ValueError("fewer samples than devices")
    for attempt in range(spec.max_retries):
        rng = np.random.default_rng([spec.seed, attempt])
        shards = _dirichlet_draw(ds.labels, ds.n_classes, spec.n_devices, spec.beta, rng)
        if all(shards):
            return [ds.subset(np.sort(np.asarray(s))) for s in shards]
    raise RuntimeError(
        f"no partition with all {spec.n_devices} shards non-empty after {spec.max_retries} draws"
    )


def apply_feature_shift(shards: list[Dataset], scale: float, seed) -> list[Dataset]:
    """Add a per-device Gaussian mean shift to every shard (feature skew)."""
    if scale == 0:
        return shards
    rng = np.random.default_rng(seed)
    out = []
    for shard in shards:
        shift = scale * rng.standard_normal(shard.feature_dim)
        out.append(Dataset(shard.features + shift, shard.labels, shard.n_classes))
    return out


def label_skew(shards: list[Dataset], reference: Dataset) -> float:
    """Mean total-variation distance between device and global label mixes."""
    glob = reference.class_counts() / len(reference)
    tv = [0.5 * np.abs(s.class_counts() / len(s) - glob).sum() for s in shards]
    return float(np.mean(tv))


class BatchSampler:
    """Epoch-based sampling without replacement, reshuffled every epoch."""

    def __init__(self, data: Dataset, batch_size: int, rng: np.random.Generator):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.data = data
        self.batch_size = min(batch_size, len(data))
        self.rng = rng
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next(self) -> Batch:
        if self._pos + self.batch_size > len(self._order):
            self._order = self.rng.permutation(len(self.data))
            self._pos = 0
        idx = self._order[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return Batch(self.data.features[idx], self.data.labels[idx])


def load_csv(path, n_classes: int | None = None) -> Dataset:
    """Read ``feature..., label`` rows; the first line must be a header."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) < 2:
            raise ValueError(f"{path}: missing header line")
        rows = [row for row in reader if row]
    if not rows:
        raise ValueError(f"{path}: no data rows")
    arr = np.array(rows, dtype=float)
    labels = arr[:, -1]
    if not np.all(labels == np.round(labels)):
        raise ValueError(f"{path}: labels must be integers")
    labels = labels.astype(np.int64)
    k = n_classes if n_classes is not None else int(labels.max()) + 1
    return Dataset(arr[:, :-1], labels, k)


def save_csv(ds: Dataset, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j}" for j in range(ds.feature_dim)] + ["label"])
        for x, y in zip(ds.features, ds.labels):
            w.writerow([repr(float(v)) for v in x] + [int(y)])
