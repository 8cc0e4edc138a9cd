"""Synthetic datasets, non-IID client partitions and minibatch samplers."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ssfl.nn import Batch
from ssfl.seeding import substream


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.features) != len(self.labels):
            raise ValueError("features and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label out of range")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[indices], self.labels[indices], self.num_classes)

    def batch(self, indices=None) -> Batch:
        if indices is None:
            return Batch(self.features, self.labels, self.num_classes)
        return Batch(self.features[indices], self.labels[indices], self.num_classes)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"f{i}" for i in range(self.num_features)] + ["label"])
            for x, y in zip(self.features, self.labels):
                w.writerow([repr(float(v)) for v in x] + [int(y)])

    @classmethod
    def from_csv(cls, path, num_classes: int | None = None) -> "Dataset":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        expected = [f"f{i}" for i in range(len(header) - 1)] + ["label"]
        if header != expected:
            raise ValueError(f"{path}: header must be f0..f{{F-1}},label")
        features = np.array([[float(v) for v in r[:-1]] for r in body]).reshape(len(body), len(header) - 1)
        labels = np.array([int(r[-1]) for r in body], dtype=np.int64)
        if num_classes is None:
            num_classes = int(labels.max()) + 1
        return cls(features, labels, num_classes)


@dataclass
class ClientShard:
    client_id: int
    indices: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)

    @property
    def n_k(self) -> int:
        return len(self.indices)


@dataclass
class PartitionSpec:
    mode: str = "dirichlet"
    K: int = 10
    alpha: float = 0.3
    classes_per_client: int = 2
    prior: np.ndarray | None = None
    seed: int = 0

    def prior_for(self, num_classes: int) -> np.ndarray:
        if self.prior is None:
            return np.full(num_classes, 1.0 / num_classes)
        p = np.asarray(self.prior, dtype=np.float64)
        if p.shape != (num_classes,) or (p < 0).any() or not np.isclose(p.sum(), 1.0):
            raise ValueError("prior must be a probability vector over the classes")
        return p


@dataclass
class Partition:
    """Shards plus the per-client class weights that produced them.

    ``weights[k, c]`` is the relative claim of client ``k`` on class ``c``;
    :func:`apply_partition` reuses it to carve per-client test sets that follow
    the same label distribution as training.
    """

    shards: list[ClientShard]
    weights: np.ndarray = field(repr=False)


def make_synthetic(num_classes: int, num_features: int, per_class: int, spread: float, seed: int,
                   test_per_class: int | None = None) -> tuple[Dataset, Dataset]:
    """Gaussian blobs: unit-norm random class means scaled by ``spread``, identity covariance.

    Returns ``(train, test)``; the test split is drawn from the same clusters.
    """
    if num_classes < 2 or num_features < 2 or per_class < 10:
        raise ValueError("need num_classes >= 2, num_features >= 2, per_class >= 10")
    if test_per_class is None:
        test_per_class = max(per_class // 5, 10)
    rng = substream(seed, "data")
    means = rng.normal(size=(num_classes, num_features))
    means *= spread / np.linalg.norm(means, axis=1, keepdims=True)

    def draw(count):
        labels = np.repeat(np.arange(num_classes), count)
        feats = means[labels] + rng.normal(size=(len(labels), num_features))
        return Dataset(feats, labels, num_classes)

    return draw(per_class), draw(test_per_class)


def _largest_remainder(total: int, fractions: np.ndarray) -> np.ndarray:
    raw = total * fractions
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def apply_partition(labels: np.ndarray, weights: np.ndarray, rng: np.random.Generator) -> list[np.ndarray]:
    """Split every class among clients in proportion to column ``weights[:, c]``.

    A class nobody claims goes whole to the client with the largest weight on
    it (ties broken at random), so every sample lands somewhere.
    """
    K, N = weights.shape
    parts: list[list[np.ndarray]] = [[] for _ in range(K)]
    for c in range(N):
        idx = np.flatnonzero(labels == c)
        if len(idx) == 0:
            continue
        idx = rng.permutation(idx)
        col = weights[:, c]
        if col.sum() <= 0:
            col = np.zeros(K)
            col[rng.integers(K)] = 1.0
        counts = _largest_remainder(len(idx), col / col.sum())
        for k, chunk in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
            parts[k].append(chunk)
    return [np.sort(np.concatenate(p)) if p else np.empty(0, dtype=np.int64) for p in parts]


def partition_dirichlet(dataset: Dataset, spec: PartitionSpec) -> Partition:
    """Label-skewed split with client class proportions ``q_k ~ Dir(alpha * p)``.

    Each class is divided among clients in proportion to their drawn ``q_k[c]``
    with largest-remainder rounding, so the split is exact and complete.  Client
    histograms track ``p`` for large alpha when class sizes are proportional to
    ``p`` (always true for the uniform prior on balanced data).
    """
    if spec.alpha <= 0:
        raise ValueError("alpha must be positive")
    K, N = spec.K, dataset.num_classes
    if K < 1 or K > len(dataset):
        raise ValueError(f"cannot split {len(dataset)} samples among {K} clients")
    p = spec.prior_for(N)
    rng = substream(spec.seed, "partition")
    weights = rng.dirichlet(spec.alpha * p, size=K)
    parts = apply_partition(dataset.labels, weights, rng)

    for k in range(K):
        retries = 0
        while len(parts[k]) == 0 and retries < 100:
            weights[k] = rng.dirichlet(spec.alpha * p)
            parts = apply_partition(dataset.labels, weights, rng)
            retries += 1
    for k in range(K):
        if len(parts[k]) == 0:
            donors = [j for j in range(K) if len(parts[j]) > 1]
            j = donors[rng.integers(len(donors))]
            pick = rng.integers(len(parts[j]))
            parts[k] = parts[j][pick:pick + 1]
            parts[j] = np.delete(parts[j], pick)
    return Partition([ClientShard(k, parts[k]) for k in range(K)], weights)


def partition_pathological(dataset: Dataset, spec: PartitionSpec) -> Partition:
    """Every client holds exactly ``min(classes_per_client, N)`` classes.

    Classes are dealt from a random permutation in a cyclic window, so the
    label sets are distinct within a client and every class is covered once
    ``K * classes_per_client >= N``.
    """
    K, N = spec.K, dataset.num_classes
    c = min(spec.classes_per_client, N)
    if c < 1:
        raise ValueError("classes_per_client must be >= 1")
    if K * c < N:
        raise ValueError(f"{K} clients x {c} classes cannot cover {N} classes")
    rng = substream(spec.seed, "partition")
    perm = rng.permutation(N)
    order = rng.permutation(K)
    weights = np.zeros((K, N))
    for slot, k in enumerate(order):
        for j in range(c):
            weights[k, perm[(slot * c + j) % N]] = 1.0
    holders = weights.sum(axis=0)
    class_sizes = np.bincount(dataset.labels, minlength=N)
    if (class_sizes < holders).any():
        raise ValueError("some class has fewer samples than clients assigned to it")
    parts = apply_partition(dataset.labels, weights, rng)
    return Partition([ClientShard(k, parts[k]) for k in range(K)], weights)


def partition(dataset: Dataset, spec: PartitionSpec) -> Partition:
    if spec.mode == "dirichlet":
        return partition_dirichlet(dataset, spec)
    if spec.mode == "pathological":
        return partition_pathological(dataset, spec)
    raise ValueError(f"unknown partition mode {spec.mode!r}")


def sample_balanced_minibatch(shard: ClientShard, dataset: Dataset, B: int, seed) -> Batch:
    """Minibatch in which every class present in the shard appears equally often (to within one).

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    if shard.n_k == 0:
        raise ValueError(f"client {shard.client_id} has an empty shard")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    labels = dataset.labels[shard.indices]
    classes = np.unique(labels)
    if B < len(classes):
        raise ValueError(f"batch size {B} is smaller than the {len(classes)} classes present")
    counts = np.full(len(classes), B // len(classes))
    counts[rng.permutation(len(classes))[: B % len(classes)]] += 1
    picked = []
    for cls, n in zip(classes, counts):
        pool = shard.indices[labels == cls]
        picked.append(rng.choice(pool, size=n, replace=n > len(pool)))
    return dataset.batch(np.concatenate(picked))


class EpochSampler:
    """Uniform minibatches without replacement; reshuffles when an epoch runs out."""

    def __init__(self, shard: ClientShard, rng: np.random.Generator):
        if shard.n_k == 0:
            raise ValueError(f"client {shard.client_id} has an empty shard")
        self.shard = shard
        self.rng = rng
        self._queue = np.empty(0, dtype=np.int64)

    def next_indices(self, B: int) -> np.ndarray:
        out = []
        need = B
        while need > 0:
            if len(self._queue) == 0:
                self._queue = self.rng.permutation(self.shard.indices)
            take = self._queue[:need]
            self._queue = self._queue[need:]
            out.append(take)
            need -= len(take)
        return np.concatenate(out)


def sample_minibatch(sampler: EpochSampler, dataset: Dataset, B: int) -> Batch:
    return dataset.batch(sampler.next_indices(B))


def label_entropy(labels: np.ndarray, num_classes: int) -> float:
    counts = np.bincount(labels, minlength=num_classes).astype(np.float64)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())
