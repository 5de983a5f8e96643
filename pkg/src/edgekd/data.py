"""Synthetic datasets, core/edge partitioning and label corruption."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DATASET_MAGIC = "edgekd-dataset"
DATASET_VERSION = 1
# relative spread of 50 +/- 6.9 samples per class
DEFAULT_JITTER = 6.9 / 50.0


@dataclass
class LabeledSet:
    ids: np.ndarray
    inputs: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self) -> None:
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not len(self.ids) == len(self.inputs) == len(self.labels):
            raise ValueError("ids, inputs and labels must have equal length")
        if self.inputs.ndim != 2:
            raise ValueError("inputs must be a 2-D matrix")
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValueError("sample ids must be unique")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def class_counts(self) -> list[int]:
        return np.bincount(self.labels, minlength=self.class_count).tolist()

    def subset(self, positions: np.ndarray) -> LabeledSet:
        positions = np.asarray(positions, dtype=np.int64)
        return LabeledSet(self.ids[positions], self.inputs[positions], self.labels[positions],
                          self.class_count)

    def select_ids(self, ids) -> LabeledSet:
        lookup = {int(i): k for k, i in enumerate(self.ids)}
        return self.subset(np.array([lookup[int(i)] for i in ids], dtype=np.int64))


def make_synthetic(class_count: int, samples_per_class: int, input_dim: int,
                   difficulty: float = 0.5, seed: int = 0,
                   clusters_per_class: int = 1) -> LabeledSet:
    """Gaussian-mixture classification data.

    Cluster centres are random directions scaled to radius 4. With
    ``clusters_per_class > 1`` each class is a union of that many independently
    placed clusters, which makes the decision regions nonlinear. ``difficulty`` in
    ``[0, 1]`` sets the within-cluster standard deviation from 0.05 up to 3.0,
    so 0 gives nearly point-like, perfectly separable classes.
    """
    if min(class_count, samples_per_class, input_dim, clusters_per_class) <= 0:
        raise ValueError("counts and dimensions must be positive")
    if not 0.0 <= difficulty <= 1.0:
        raise ValueError("difficulty must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    sub = rng.normal(size=(class_count, clusters_per_class, input_dim))
    sub *= 4.0 / np.linalg.norm(sub, axis=2, keepdims=True)
    spread = 0.05 + difficulty * (3.0 - 0.05)
    labels = np.repeat(np.arange(class_count), samples_per_class)
    which = rng.integers(0, clusters_per_class, size=len(labels))
    inputs = sub[labels, which] + spread * rng.normal(size=(len(labels), input_dim))
    order = rng.permutation(len(labels))
    return LabeledSet(np.arange(len(labels)), inputs[order], labels[order], class_count)


def stratified_split(dataset: LabeledSet, fraction: float, seed: int) -> tuple[LabeledSet, LabeledSet]:
    """Split off ``fraction`` of every class; returns ``(rest, held_out)``."""
    rng = np.random.default_rng(seed)
    held = []
    for c in range(dataset.class_count):
        pos = np.flatnonzero(dataset.labels == c)
        k = int(round(fraction * len(pos)))
        held.extend(rng.permutation(pos)[:k].tolist())
    held_mask = np.zeros(len(dataset), dtype=bool)
    held_mask[held] = True
    return dataset.subset(np.flatnonzero(~held_mask)), dataset.subset(np.flatnonzero(held_mask))


@dataclass
class DatasetPartition:
    core: LabeledSet
    edges: list[LabeledSet]
    class_count: int
    per_class_stats: dict[str, list[int]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.per_class_stats:
            self.per_class_stats = {"core": self.core.class_counts()}
            for k, e in enumerate(self.edges, start=1):
                self.per_class_stats[f"edge_{k}"] = e.class_counts()

    @property
    def K(self) -> int:
        return len(self.edges)

    def all_parts(self) -> dict[str, LabeledSet]:
        parts = {"core": self.core}
        parts.update({f"edge_{k}": e for k, e in enumerate(self.edges, start=1)})
        return parts

    def manifest(self) -> dict:
        return {name: part.ids.tolist() for name, part in self.all_parts().items()}


def _allocate(n: int, shares: np.ndarray) -> np.ndarray:
    """Largest-remainder integer allocation of ``n`` items by ``shares``."""
    raw = n * shares / shares.sum()
    counts = np.floor(raw).astype(np.int64)
    remainder = n - counts.sum()
    if remainder > 0:
        # stable sort keeps ties in partition order
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:remainder]] += 1
    return counts


def partition(dataset: LabeledSet, K: int, core_fraction: float | None = None,
              jitter: float = DEFAULT_JITTER, seed: int = 0,
              require_all_classes: bool = True) -> DatasetPartition:
    """Split into one core set and ``K`` disjoint edge sets.

    Per class, the core receives ``core_fraction`` of the samples (the even
    share ``1/(K+1)`` by default) and the edges split the rest. Each target
    count is multiplied by ``1 + jitter * z`` with ``z`` standard normal, then
    rounded so every sample lands in exactly one partition.
    """
    if K < 0:
        raise ValueError("K must be non-negative")
    if jitter < 0:
        raise ValueError("jitter must be non-negative")
    if core_fraction is None:
        core_fraction = 1.0 / (K + 1)
    if not 0.0 < core_fraction <= 1.0:
        raise ValueError("core_fraction must lie in (0, 1]")
    if K == 0:
        return DatasetPartition(dataset, [], dataset.class_count)
    rng = np.random.default_rng(seed)
    base = np.array([core_fraction] + [(1.0 - core_fraction) / K] * K)
    members: list[list[int]] = [[] for _ in range(K + 1)]
    for c in range(dataset.class_count):
        pos = rng.permutation(np.flatnonzero(dataset.labels == c))
        shares = base * np.clip(1.0 + jitter * rng.normal(size=K + 1), 0.05, None)
        counts = _allocate(len(pos), shares)
        if require_all_classes and counts.min() < 1:
            name = "core" if counts.argmin() == 0 else f"edge_{counts.argmin()}"
            raise ValueError(
                f"infeasible split: class {c} has {len(pos)} samples, partition {name} would get none"
            )
        bounds = np.concatenate([[0], np.cumsum(counts)])
        for p in range(K + 1):
            members[p].extend(pos[bounds[p]:bounds[p + 1]].tolist())
    parts = [dataset.subset(np.sort(np.array(m, dtype=np.int64))) for m in members]
    return DatasetPartition(parts[0], parts[1:], dataset.class_count)


@dataclass
class NoiseSpec:
    p: float = 0.0
    noisy_edge_ids: set[int] = field(default_factory=set)
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("noise probability p must lie in [0, 1]")
        self.noisy_edge_ids = {int(k) for k in self.noisy_edge_ids}


def corrupt_labels(edge_data: LabeledSet, spec: NoiseSpec, batch_size: int) -> LabeledSet:
    """Permute labels against inputs inside whole batches, each with prob ``p``.

    Batches are consecutive runs of ``batch_size`` rows in stored order. Inputs
    and ids are untouched and the label multiset is preserved.
    """
    if batch_size <= 0:
        raise ValueError("batch_size must be positive")
    rng = np.random.default_rng(spec.rng_seed)
    labels = edge_data.labels.copy()
    for start in range(0, len(labels), batch_size):
        if rng.random() < spec.p:
            labels[start:start + batch_size] = rng.permutation(labels[start:start + batch_size])
    return LabeledSet(edge_data.ids.copy(), edge_data.inputs.copy(), labels, edge_data.class_count)


def save_dataset(dataset: LabeledSet, path: str | Path) -> None:
    """Text format: one header line, then ``id,label,f1,...,fd`` rows.

    Floats are written with ``repr`` so loading is bit-exact.
    """
    with open(path, "w") as fh:
        fh.write(f"# {DATASET_MAGIC} v{DATASET_VERSION} class_count={dataset.class_count} "
                 f"input_dim={dataset.input_dim} samples={len(dataset)}\n")
        for i, y, row in zip(dataset.ids, dataset.labels, dataset.inputs):
            fh.write(f"{int(i)},{int(y)}," + ",".join(repr(float(v)) for v in row) + "\n")


def load_dataset(path: str | Path) -> LabeledSet:
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) < 3 or header[1] != DATASET_MAGIC:
            raise ValueError(f"{path} is not an {DATASET_MAGIC} file")
        if header[2] != f"v{DATASET_VERSION}":
            raise ValueError(f"unsupported dataset version {header[2]}")
        meta = dict(item.split("=") for item in header[3:])
        rows = [line.rstrip("\n").split(",") for line in fh if line.strip()]
    input_dim, n = int(meta["input_dim"]), int(meta["samples"])
    if len(rows) != n:
        raise ValueError(f"header announces {n} samples, file has {len(rows)}")
    ids = np.array([int(r[0]) for r in rows], dtype=np.int64)
    labels = np.array([int(r[1]) for r in rows], dtype=np.int64)
    inputs = np.array([[float(v) for v in r[2:]] for r in rows], dtype=np.float64).reshape(n, input_dim)
    return LabeledSet(ids, inputs, labels, int(meta["class_count"]))


def save_partition_manifest(part: DatasetPartition, path: str | Path, extra: dict | None = None) -> None:
    payload = {"format": "edgekd-partition", "version": 1, "class_count": part.class_count,
               "partitions": part.manifest(), "per_class_stats": part.per_class_stats}
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=1))
