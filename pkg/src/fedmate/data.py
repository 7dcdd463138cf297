"""Synthetic Gaussian-mixture data and label-skewed client partitions."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError, PartitionError


@dataclass(frozen=True)
class LabeledDataset:
    X: np.ndarray
    y: np.ndarray
    num_classes: int

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
            raise ConfigurationError(f"dataset shapes X{X.shape} y{y.shape} disagree")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise ConfigurationError("labels outside [0, num_classes)")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return self.y.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.num_classes)

    @property
    def classes(self) -> list[int]:
        return [int(k) for k in np.flatnonzero(self.class_counts)]

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.X[idx], self.y[idx], self.num_classes)

    @property
    def samples(self) -> list[tuple[np.ndarray, int]]:
        return [(self.X[i], int(self.y[i])) for i in range(len(self))]


@dataclass(frozen=True)
class MixtureSpec:
    """Parameters of the class-conditional Gaussian mixture.

    Class means sit on a sphere of radius ``radius`` (default 4 * spread).
    """

    num_classes: int = 10
    dim: int = 16
    n_per_class: int = 100
    spread: float = 1.0
    radius: Optional[float] = None
    seed: int = 0

    @property
    def sphere_radius(self) -> float:
        return 4.0 * self.spread if self.radius is None else float(self.radius)


@dataclass(frozen=True)
class PartitionSpec:
    mode: str = "skew"
    num_clients: int = 20
    skew: int = 30
    dominant_classes: int = 2
    classes_per_client: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("skew", "pathological"):
            raise ConfigurationError(f"unknown partition mode {self.mode!r}")
        if not 0 <= self.skew <= 100:
            raise ConfigurationError(f"skew s must be in [0, 100], got {self.skew}")
        if self.num_clients < 1:
            raise ConfigurationError("need at least one client")


def mixture_means(num_classes: int, d: int, radius: float, rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal((num_classes, d))
    return radius * v / np.linalg.norm(v, axis=1, keepdims=True)


def sample_mixture(means: np.ndarray, counts: Sequence[int], spread: float,
                   rng: np.random.Generator) -> LabeledDataset:
    C, d = means.shape
    y = np.repeat(np.arange(C), counts)
    X = means[y] + spread * rng.standard_normal((y.size, d))
    return LabeledDataset(X, y, C)


def _mixture_streams(spec: MixtureSpec):
    ss = np.random.SeedSequence(spec.seed)
    means_ss, train_ss, test_ss = ss.spawn(3)
    means = mixture_means(spec.num_classes, spec.dim, spec.sphere_radius, np.random.default_rng(means_ss))
    return means, np.random.default_rng(train_ss), test_ss


def generate_gaussian_mixture(num_classes=10, d=16, n_per_class=100, cluster_spread=1.0,
                              seed=0, radius=None) -> LabeledDataset:
    spec = MixtureSpec(num_classes, d, n_per_class, cluster_spread, radius, seed)
    return generate_from_spec(spec)


def generate_from_spec(spec: MixtureSpec) -> LabeledDataset:
    if spec.num_classes < 2 or spec.dim < 2:
        raise ConfigurationError("need at least 2 classes and 2 input dimensions")
    means, rng, _ = _mixture_streams(spec)
    return sample_mixture(means, [spec.n_per_class] * spec.num_classes, spec.spread, rng)


def _even_split(idx: np.ndarray, parts: int, offset: int = 0) -> list[np.ndarray]:
    """Split ``idx`` into ``parts`` near-equal chunks; the larger chunks start
    at position ``offset`` (cyclically) so remainders rotate across calls."""
    base, extra = divmod(idx.size, parts)
    sizes = np.full(parts, base)
    for j in range(extra):
        sizes[(offset + j) % parts] += 1
    return np.split(idx, np.cumsum(sizes)[:-1])


def _cyclic_assignment(num_classes: int, num_clients: int, per_client: int,
                       rng: np.random.Generator) -> list[list[int]]:
    """Give each client ``per_client`` distinct classes by walking a random
    class permutation cyclically, so that every class is used once
    ``num_clients * per_client >= num_classes``."""
    order = rng.permutation(num_classes)
    out = []
    for i in range(num_clients):
        start = i * per_client
        out.append(sorted(int(order[(start + j) % num_classes]) for j in range(per_client)))
    return out


def partition_skew(data: LabeledDataset, N: int, s: int, seed: int = 0,
                   dominant_classes: int = 2) -> list[LabeledDataset]:
    """Split ``data`` among ``N`` clients with s% class-uniform data.

    For every class, s% of its samples are dealt evenly to all clients and the
    remaining (100 - s)% evenly to the clients that hold it as a dominant
    class.  A class that is nobody's dominant class is dealt entirely
    uniformly, which needs s > 0.
    """
    if not 0 <= s <= 100:
        raise ConfigurationError(f"s must be in [0, 100], got {s}")
    C = data.num_classes
    m = min(dominant_classes, C)
    rng = np.random.default_rng(seed)
    dominant = _cyclic_assignment(C, N, m, rng)
    holders = {k: [i for i in range(N) if k in dominant[i]] for k in range(C)}
    counts = data.class_counts
    parts: list[list[np.ndarray]] = [[] for _ in range(N)]
    for k in range(C):
        idx = rng.permutation(np.flatnonzero(data.y == k))
        if counts[k] == 0:
            if holders[k] and s < 100:
                raise PartitionError(f"class {k} has no samples but is dominant for clients {holders[k]}")
            continue
        if not holders[k]:
            if s == 0:
                raise PartitionError(f"class {k} cannot be placed: no dominant holder and s=0")
            n_uniform = idx.size
        else:
            n_uniform = int(round(idx.size * s / 100.0))
        for i, chunk in enumerate(_even_split(idx[:n_uniform], N, offset=k)):
            parts[i].append(chunk)
        rest = idx[n_uniform:]
        if rest.size:
            for i, chunk in zip(holders[k], _even_split(rest, len(holders[k]), offset=k)):
                parts[i].append(chunk)
    return [data.subset(np.sort(np.concatenate(p)) if p else np.array([], dtype=np.int64)) for p in parts]


def partition_pathological(data: LabeledDataset, N: int, classes_per_client: int,
                           seed: int = 0) -> list[LabeledDataset]:
    """Each client gets exactly ``classes_per_client`` classes; each class's
    samples are split evenly among the clients holding it."""
    C = data.num_classes
    if not 1 <= classes_per_client <= C:
        raise PartitionError(f"classes_per_client must be in [1, {C}], got {classes_per_client}")
    if classes_per_client * N < C:
        raise PartitionError(
            f"{N} clients x {classes_per_client} classes cannot cover {C} classes"
        )
    rng = np.random.default_rng(seed)
    assign = _cyclic_assignment(C, N, classes_per_client, rng)
    counts = data.class_counts
    parts: list[list[np.ndarray]] = [[] for _ in range(N)]
    for k in range(C):
        holders = [i for i in range(N) if k in assign[i]]
        if counts[k] < len(holders):
            raise PartitionError(f"class {k} has {counts[k]} samples for {len(holders)} clients")
        idx = rng.permutation(np.flatnonzero(data.y == k))
        for i, chunk in zip(holders, _even_split(idx, len(holders), offset=k)):
            parts[i].append(chunk)
    return [data.subset(np.sort(np.concatenate(p))) for p in parts]


def partition(data: LabeledDataset, spec: PartitionSpec) -> list[LabeledDataset]:
    if spec.mode == "skew":
        return partition_skew(data, spec.num_clients, spec.skew, spec.seed, spec.dominant_classes)
    return partition_pathological(data, spec.num_clients, spec.classes_per_client, spec.seed)


def _largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    raw = weights / weights.sum() * total
    out = np.floor(raw).astype(np.int64)
    short = total - out.sum()
    order = np.argsort(-(raw - out), kind="stable")
    out[order[:short]] += 1
    return out


def make_test_sets(data_spec: MixtureSpec, clients: Sequence[LabeledDataset],
                   per_class: Optional[int] = None, matched_size: Optional[int] = None):
    """Fresh draws from the training mixture.

    Returns a class-balanced global test set (``per_class`` samples per class,
    default ``n_per_class``) and, per client, a test set whose class histogram
    mirrors that client's training histogram (same size as its training set
    unless ``matched_size`` is given).
    """
    means, _, test_ss = _mixture_streams(data_spec)
    global_ss, *client_ss = test_ss.spawn(1 + len(clients))
    per_class = data_spec.n_per_class if per_class is None else per_class
    balanced = sample_mixture(means, [per_class] * data_spec.num_classes, data_spec.spread,
                              np.random.default_rng(global_ss))
    matched = []
    for ds, ss in zip(clients, client_ss):
        hist = ds.class_counts.astype(np.float64)
        size = len(ds) if matched_size is None else matched_size
        counts = _largest_remainder(hist, size) if hist.sum() > 0 else np.zeros_like(hist, dtype=np.int64)
        matched.append(sample_mixture(means, counts, data_spec.spread, np.random.default_rng(ss)))
    return balanced, matched


def save_csv(data: LabeledDataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", *[f"f{j}" for j in range(data.dim)]])
        for x, y in zip(data.X, data.y):
            w.writerow([int(y), *[repr(float(v)) for v in x]])


def load_csv(path, num_classes: Optional[int] = None) -> LabeledDataset:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if not header or header[0] != "label":
            raise ConfigurationError(f"{path}: expected header starting with 'label'")
        rows = [row for row in r if row]
    y = np.array([int(row[0]) for row in rows], dtype=np.int64)
    X = np.array([[float(v) for v in row[1:]] for row in rows], dtype=np.float64).reshape(len(rows), len(header) - 1)
    C = int(y.max()) + 1 if num_classes is None else num_classes
    return LabeledDataset(X, y, C)
