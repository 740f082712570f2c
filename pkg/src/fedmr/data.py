"""Synthetic blob datasets and IID / Dirichlet client partitioning."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EmptyShardError, InfeasibleCentersError, InfeasiblePartitionError


@dataclass(frozen=True, eq=False)
class Samples:
    """Feature matrix ``X`` (n, d) and integer labels ``y`` (n,)."""

    X: np.ndarray
    y: np.ndarray
    num_classes: int

    def __post_init__(self):
        X = np.ascontiguousarray(self.X, dtype=np.float64)
        y = np.ascontiguousarray(self.y, dtype=np.int64)
        if X.ndim != 2 or y.shape != (X.shape[0],):
            raise ValueError(f"bad sample shapes X={X.shape} y={y.shape}")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return self.y.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "Samples":
        idx = np.asarray(idx, dtype=np.int64)
        return Samples(self.X[idx], self.y[idx], self.num_classes)

    def histogram(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.num_classes)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.X.astype("<f8").tobytes())
        h.update(self.y.astype("<i8").tobytes())
        h.update(str(self.num_classes).encode())
        return h.hexdigest()


@dataclass(frozen=True, eq=False)
class BlobDataset:
    train: Samples
    test: Samples
    centers: np.ndarray


@dataclass(frozen=True, eq=False)
class ClientShard:
    client_id: int
    samples: Samples
    indices: np.ndarray = field(repr=False)

    def __post_init__(self):
        if len(self.samples) < 1:
            raise EmptyShardError(f"client {self.client_id} has no samples")

    @property
    def X(self) -> np.ndarray:
        return self.samples.X

    @property
    def y(self) -> np.ndarray:
        return self.samples.y

    @property
    def num_classes(self) -> int:
        return self.samples.num_classes

    @property
    def class_histogram(self) -> np.ndarray:
        return self.samples.histogram()

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class PartitionSpec:
    num_clients: int
    mode: str = "iid"
    alpha: float | None = None
    min_shard_size: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if self.mode not in ("iid", "dirichlet"):
            raise ValueError(f"unknown partition mode {self.mode!r}")
        if self.mode == "dirichlet" and not (self.alpha is not None and self.alpha > 0):
            raise ValueError("dirichlet mode needs alpha > 0")
        if self.min_shard_size < 1:
            raise ValueError("min_shard_size must be >= 1")


def simplex_centers(num_classes: int, dim: int) -> np.ndarray:
    """Unit-norm vertices of a regular simplex, embedded in the first coordinates."""
    if num_classes == 1:
        c = np.zeros((1, dim))
        c[0, 0] = 1.0
        return c
    if dim < num_classes - 1:
        raise InfeasibleCentersError(
            f"{num_classes} simplex centers need dim >= {num_classes - 1}, got {dim}"
        )
    eye = np.eye(num_classes)
    centered = eye - eye.mean(axis=0)
    # Rows span a (C-1)-dim subspace; express them in an orthonormal basis of it.
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    coords = centered @ vt[: num_classes - 1].T
    coords /= np.linalg.norm(coords, axis=1, keepdims=True)
    out = np.zeros((num_classes, dim))
    out[:, : num_classes - 1] = coords
    return out


def make_blobs(
    num_classes: int,
    dim: int,
    per_class: int,
    spread: float,
    seed: int,
    test_fraction: float = 0.2,
) -> BlobDataset:
    """Balanced Gaussian blobs around unit-norm simplex centers.

    Samples of class ``c`` are ``center_c + spread * N(0, I)``. Each class is split
    ``round(test_fraction * per_class)`` to test and the rest to train.
    """
    if num_classes < 1 or dim < 1 or per_class < 1:
        raise ValueError("num_classes, dim and per_class must be >= 1")
    if not spread > 0:
        raise ValueError("spread must be > 0")
    centers = simplex_centers(num_classes, dim)
    rng = np.random.default_rng(seed)
    n_test = int(round(test_fraction * per_class))
    tr_X, tr_y, te_X, te_y = [], [], [], []
    for c in range(num_classes):
        pts = centers[c] + spread * rng.standard_normal((per_class, dim))
        tr_X.append(pts[n_test:])
        te_X.append(pts[:n_test])
        tr_y.append(np.full(per_class - n_test, c))
        te_y.append(np.full(n_test, c))
    train = Samples(np.concatenate(tr_X), np.concatenate(tr_y), num_classes)
    test = Samples(
        np.concatenate(te_X).reshape(-1, dim), np.concatenate(te_y), num_classes
    )
    # Shuffle so that downstream consumers never see class-sorted order.
    perm = rng.permutation(len(train))
    train = train.subset(perm)
    if len(test):
        test = test.subset(rng.permutation(len(test)))
    return BlobDataset(train, test, centers)


def largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to ``total``, closest to ``proportions * total``.

    Ties in the fractional parts go to the lower index.
    """
    raw = np.asarray(proportions, dtype=np.float64) * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def partition(dataset: Samples, spec: PartitionSpec) -> list[ClientShard]:
    """Split ``dataset`` into ``spec.num_clients`` disjoint shards that cover it.

    Dirichlet mode draws ``p_c ~ Dir(alpha * 1_N)`` per class and allocates that
    class by largest remainder. Afterwards, while some shard holds fewer than
    ``min_shard_size`` samples, one sample chosen uniformly from the current
    largest shard (lowest id on ties) moves to the smallest one.
    """
    n = len(dataset)
    N = spec.num_clients
    if n == 0:
        raise InfeasiblePartitionError("dataset is empty")
    if N > n:
        raise InfeasiblePartitionError(f"{N} clients but only {n} training samples")
    if N * spec.min_shard_size > n:
        raise InfeasiblePartitionError(
            f"min_shard_size {spec.min_shard_size} x {N} clients exceeds {n} samples"
        )
    rng = np.random.default_rng(spec.seed)
    owners: list[list[int]] = [[] for _ in range(N)]
    if spec.mode == "iid":
        perm = rng.permutation(n)
        for cid, chunk in enumerate(np.array_split(perm, N)):
            owners[cid].extend(chunk.tolist())
    else:
        for c in range(dataset.num_classes):
            idx = np.flatnonzero(dataset.y == c)
            if idx.size == 0:
                continue
            idx = rng.permutation(idx)
            p = rng.dirichlet(np.full(N, float(spec.alpha)))
            counts = largest_remainder(p, idx.size)
            start = 0
            for cid in range(N):
                owners[cid].extend(idx[start:start + counts[cid]].tolist())
                start += counts[cid]
    _rebalance(owners, spec.min_shard_size, rng)
    shards = []
    for cid, own in enumerate(owners):
        ind = np.sort(np.asarray(own, dtype=np.int64))
        shards.append(ClientShard(cid, dataset.subset(ind), ind))
    return shards


def _rebalance(owners: list[list[int]], min_size: int, rng: np.random.Generator) -> None:
    while True:
        sizes = [len(o) for o in owners]
        small = int(np.argmin(sizes))
        if sizes[small] >= min_size:
            return
        big = int(np.argmax(sizes))
        pick = int(rng.integers(sizes[big]))
        owners[small].append(owners[big].pop(pick))


def label_distribution(hist: np.ndarray) -> np.ndarray:
    hist = np.asarray(hist, dtype=np.float64)
    total = hist.sum()
    return hist / total if total > 0 else hist


def entropy(p: np.ndarray) -> float:
    """Shannon entropy in nats."""
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


@dataclass(frozen=True)
class HeterogeneityReport:
    entropy: list[float]
    emd: list[float]

    @property
    def mean_entropy(self) -> float:
        return float(np.mean(self.entropy))

    @property
    def mean_emd(self) -> float:
        return float(np.mean(self.emd))


def heterogeneity_report(shards: Sequence[ClientShard]) -> HeterogeneityReport:
    """Per-client label entropy and earth-mover distance to the pooled label distribution.

    Labels are categorical, so the ground distance is 1 between distinct classes
    and the EMD reduces to half the L1 distance between the distributions.
    """
    hists = np.stack([s.class_histogram for s in shards]).astype(np.float64)
    pooled = label_distribution(hists.sum(axis=0))
    ents, emds = [], []
    for h in hists:
        p = label_distribution(h)
        ents.append(entropy(p))
        emds.append(0.5 * float(np.abs(p - pooled).sum()))
    return HeterogeneityReport(ents, emds)


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


def write_jsonl(samples: Samples, path: str | Path) -> None:
    with open(path, "w") as fh:
        for i in range(len(samples)):
            fh.write(
                json.dumps({"index": i, "x": samples.X[i].tolist(), "y": int(samples.y[i])})
                + "\n"
            )


def read_jsonl(path: str | Path, num_classes: int) -> Samples:
    xs, ys = [], []
    with open(path) as fh:
        for line in fh:
            doc = json.loads(line)
            xs.append(doc["x"])
            ys.append(doc["y"])
    return Samples(np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.int64), num_classes)


def partition_map(shards: Sequence[ClientShard]) -> dict[str, list[int]]:
    return {str(s.client_id): s.indices.tolist() for s in shards}


def write_partition_map(shards: Sequence[ClientShard], path: str | Path) -> None:
    Path(path).write_text(json.dumps(partition_map(shards), indent=1))


def shards_from_map(dataset: Samples, mapping: dict[str, list[int]]) -> list[ClientShard]:
    out = []
    for cid in sorted(mapping, key=int):
        ind = np.asarray(mapping[cid], dtype=np.int64)
        out.append(ClientShard(int(cid), dataset.subset(ind), ind))
    return out


def data_fingerprint(train: Samples, test: Samples, shards: Sequence[ClientShard]) -> str:
    h = hashlib.sha256()
    h.update(train.fingerprint().encode())
    h.update(test.fingerprint().encode())
    h.update(json.dumps(partition_map(shards), sort_keys=True).encode())
    return h.hexdigest()[:32]


def default_min_shard_size(batch_size: int, train_size: int, num_clients: int) -> int:
    """``2 * batch_size``, capped so that every client can still be served."""
    return max(1, min(2 * batch_size, train_size // num_clients))


__all__ = [
    "Samples",
    "BlobDataset",
    "ClientShard",
    "PartitionSpec",
    "HeterogeneityReport",
    "simplex_centers",
    "make_blobs",
    "largest_remainder",
    "partition",
    "heterogeneity_report",
    "entropy",
    "write_jsonl",
    "read_jsonl",
    "partition_map",
    "write_partition_map",
    "shards_from_map",
    "data_fingerprint",
    "default_min_shard_size",
]
