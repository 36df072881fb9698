"""Federated dataset generation, ingestion, and partitioning.

Builds per-client shards either synthetically (power-law sizes with
label/feature skew) or from user-supplied IDX image files. All operations
are pure functions of their configuration and seed: identical seeds give
byte-identical shards.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGES_MAGIC = 2051
LABELS_MAGIC = 2049


class IdxFormatError(ValueError):
    """An IDX file did not match the expected binary layout."""


class PartitionError(ValueError):
    """A requested client partition is infeasible."""


@dataclass(frozen=True)
class FlatDataset:
    """An unpartitioned sample matrix with integer class labels."""

    x: np.ndarray
    y: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        if self.x.shape[0] != self.y.shape[0]:
            raise ValueError("feature/label row counts differ")

    def __len__(self) -> int:
        return int(self.y.shape[0])


@dataclass(frozen=True)
class FederatedDataset:
    """Per-client shards of (features, labels) pairs."""

    shards: tuple[tuple[np.ndarray, np.ndarray], ...]
    num_classes: int
    dim: int

    def __post_init__(self) -> None:
        for k, (x, y) in enumerate(self.shards):
            if len(y) == 0:
                raise ValueError(f"shard {k} is empty")
            if x.shape != (len(y), self.dim):
                raise ValueError(f"shard {k}: feature shape {x.shape} inconsistent")
            if y.min() < 0 or y.max() >= self.num_classes:
                raise ValueError(f"shard {k}: labels outside [0, {self.num_classes})")

    @property
    def n_clients(self) -> int:
        return len(self.shards)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([len(y) for _, y in self.shards])

    @property
    def total(self) -> int:
        return int(self.sizes.sum())

    @property
    def weights(self) -> np.ndarray:
        sizes = self.sizes
        return sizes / sizes.sum()

    def pooled(self) -> tuple[np.ndarray, np.ndarray]:
        """All samples concatenated in shard order."""
        x = np.concatenate([x for x, _ in self.shards])
        y = np.concatenate([y for _, y in self.shards])
        return x, y


def power_law_shard_sizes(total: int, n_shards: int, exponent: float = 1.0) -> np.ndarray:
    """Integer shard sizes proportional to rank**(-exponent).

    Rounds by largest remainder so the sizes sum exactly to ``total``; any
    zero-sized shard is topped up from the largest one. Sizes are
    nonincreasing in rank.
    """
    if total < n_shards:
        raise PartitionError(f"cannot split {total} samples into {n_shards} shards")
    ranks = np.arange(1, n_shards + 1, dtype=float)
    share = ranks ** (-exponent)
    ideal = total * share / share.sum()
    sizes = np.floor(ideal).astype(int)
    frac = ideal - sizes
    for i in np.argsort(-frac, kind="stable")[: total - sizes.sum()]:
        sizes[i] += 1
    while (sizes == 0).any():
        sizes[np.argmax(sizes == 0)] += 1
        sizes[np.argmax(sizes)] -= 1
    return sizes


def even_shard_sizes(total: int, n_shards: int) -> np.ndarray:
    """As-equal-as-possible integer split summing exactly to ``total``."""
    if total < n_shards:
        raise PartitionError(f"cannot split {total} samples into {n_shards} shards")
    base, extra = divmod(total, n_shards)
    return np.array([base + (1 if i < extra else 0) for i in range(n_shards)])


def generate_synthetic(
    n_clients: int,
    dim: int,
    total_samples: int,
    alpha_skew: float,
    beta_skew: float,
    seed: int,
    num_classes: int = 10,
) -> FederatedDataset:
    """Generate a power-law-unbalanced, skewed multiclass dataset.

    Every client labels its samples with its own softmax ground-truth
    model: a shared base model plus per-client offsets drawn at scale
    ``alpha_skew``. Features are unit-covariance Gaussians around a
    per-client mean drawn at scale ``beta_skew``. With both skews at zero
    all clients share one generative distribution (the i.i.d. limit).
    """
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    if n_clients < 2:
        raise ValueError(f"n_clients must be >= 2, got {n_clients}")
    if total_samples < n_clients:
        raise ValueError(
            f"total_samples must be >= n_clients, got {total_samples} < {n_clients}"
        )
    rng = np.random.default_rng(seed)
    sizes = power_law_shard_sizes(total_samples, n_clients)
    base_w = rng.normal(size=(num_classes, dim))
    base_b = rng.normal(size=num_classes)
    shards = []
    for size in sizes:
        w_k = base_w + alpha_skew * rng.normal(size=(num_classes, dim))
        b_k = base_b + alpha_skew * rng.normal(size=num_classes)
        mean_k = beta_skew * rng.normal(size=dim)
        x = rng.normal(size=(size, dim)) + mean_k
        y = np.argmax(x @ w_k.T + b_k, axis=1)
        shards.append((x, y))
    return FederatedDataset(tuple(shards), num_classes, dim)


def _read_exact(f, n: int, path) -> bytes:
    buf = f.read(n)
    if len(buf) < n:
        raise IdxFormatError(f"unexpected end of file in {path}")
    return buf


def load_idx(images_path, labels_path, num_classes: int | None = None) -> FlatDataset:
    """Load an IDX image/label file pair into a flat dataset.

    Pixels are scaled to [0, 1]; each image becomes one flattened row.
    ``num_classes`` is inferred from the labels when not given.
    """
    images_path, labels_path = Path(images_path), Path(labels_path)
    with open(images_path, "rb") as f:
        magic, count, rows, cols = struct.unpack(
            ">IIII", _read_exact(f, 16, images_path)
        )
        if magic != IMAGES_MAGIC:
            raise IdxFormatError(
                f"bad magic number {magic} in {images_path} (expected {IMAGES_MAGIC})"
            )
        raw = _read_exact(f, count * rows * cols, images_path)
    x = np.frombuffer(raw, dtype=np.uint8).astype(float).reshape(count, rows * cols)
    x /= 255.0

    with open(labels_path, "rb") as f:
        magic, label_count = struct.unpack(">II", _read_exact(f, 8, labels_path))
        if magic != LABELS_MAGIC:
            raise IdxFormatError(
                f"bad magic number {magic} in {labels_path} (expected {LABELS_MAGIC})"
            )
        y = np.frombuffer(
            _read_exact(f, label_count, labels_path), dtype=np.uint8
        ).astype(int)
    if count != label_count:
        raise IdxFormatError(
            f"count mismatch: {count} images vs {label_count} labels"
        )
    if num_classes is None:
        num_classes = int(y.max()) + 1 if len(y) else 1
    return FlatDataset(x=x, y=y, num_classes=num_classes)


def subsample(data: FlatDataset, n: int, seed: int) -> FlatDataset:
    """Seeded uniform subsample without replacement."""
    if n > len(data):
        raise ValueError(f"cannot subsample {n} of {len(data)} samples")
    idx = np.sort(np.random.default_rng(seed).choice(len(data), size=n, replace=False))
    return FlatDataset(x=data.x[idx], y=data.y[idx], num_classes=data.num_classes)


def _plan_client(need, max_classes, hard_cap, pool_sizes, rng):
    """Pick classes and per-class take amounts for one client.

    Prefers draining nearly empty pools, fills the rest by pool-size
    weighted choice, and expands (up to ``hard_cap`` classes) when the
    chosen pools cannot cover ``need``.
    """
    classes = sorted(c for c, size in pool_sizes.items() if size > 0)
    if not classes:
        raise PartitionError("no samples left to assign")
    target = min(max_classes, need, len(classes))
    chosen = []
    per_class = max(1, need // target)
    for c in sorted(classes, key=lambda c: pool_sizes[c]):
        if len(chosen) >= target:
            break
        if pool_sizes[c] <= per_class:
            chosen.append(c)
    rest = [c for c in classes if c not in chosen]
    n_more = target - len(chosen)
    if n_more > 0 and rest:
        weights = np.array([pool_sizes[c] for c in rest], dtype=float)
        picked = rng.choice(
            len(rest), size=min(n_more, len(rest)), replace=False, p=weights / weights.sum()
        )
        chosen.extend(rest[i] for i in sorted(picked))
    capacity = sum(pool_sizes[c] for c in chosen)
    spare = sorted(
        (c for c in classes if c not in chosen), key=lambda c: -pool_sizes[c]
    )
    while capacity < need:
        if len(chosen) >= hard_cap or not spare:
            short = min(chosen, key=lambda c: pool_sizes[c])
            raise PartitionError(
                f"cannot gather {need} samples from <= {hard_cap} classes: "
                f"class {short} has only {pool_sizes[short]} samples left"
            )
        c = spare.pop(0)
        chosen.append(c)
        capacity += pool_sizes[c]

    # Water-fill the need across the chosen pools, capped by pool size.
    caps = np.array([pool_sizes[c] for c in chosen])
    amounts = np.zeros(len(chosen), dtype=int)
    left = need
    while left > 0:
        active = np.flatnonzero(amounts < caps)
        base, extra = divmod(left, len(active))
        want = np.zeros(len(chosen), dtype=int)
        want[active] = base
        want[active[np.argsort(-caps[active], kind="stable")[:extra]]] += 1
        give = np.minimum(want, caps - amounts)
        amounts += give
        left -= int(give.sum())
    return chosen, amounts


def partition_noniid(
    data: FlatDataset,
    n_clients: int,
    classes_per_client: tuple[int, int] = (1, 6),
    power_law: bool = True,
    seed: int = 0,
) -> FederatedDataset:
    """Partition a flat dataset into label-skewed client shards.

    Each client ends up with between ``lo`` and ``hi`` distinct classes;
    shard sizes follow a power law when requested, and the pairing of shard
    size with class count is random. Every sample is assigned to exactly
    one client. Raises :class:`PartitionError` when the requested structure
    cannot absorb the available per-class sample counts.
    """
    lo, hi = classes_per_client
    if not 1 <= lo <= hi <= data.num_classes:
        raise PartitionError(
            f"classes_per_client {classes_per_client} invalid for "
            f"{data.num_classes} classes"
        )
    rng = np.random.default_rng(seed)
    total = len(data)
    sizes = (
        power_law_shard_sizes(total, n_clients)
        if power_law
        else even_shard_sizes(total, n_clients)
    )
    rng.shuffle(sizes)
    class_counts = rng.integers(lo, hi + 1, size=n_clients)

    pools = {
        c: list(rng.permutation(np.flatnonzero(data.y == c)))
        for c in range(data.num_classes)
        if (data.y == c).any()
    }
    pool_sizes = {c: len(idx) for c, idx in pools.items()}

    assigned: list[list[int]] = [[] for _ in range(n_clients)]
    for k in np.argsort(-sizes, kind="stable"):
        need = int(sizes[k])
        if need < lo:
            raise PartitionError(
                f"shard of size {need} cannot span the required {lo} classes"
            )
        chosen, amounts = _plan_client(need, int(class_counts[k]), hi, pool_sizes, rng)
        for c, amount in zip(chosen, amounts):
            take = pools[c][-amount:] if amount else []
            del pools[c][len(pools[c]) - amount :]
            pool_sizes[c] -= int(amount)
            assigned[k].extend(int(i) for i in take)

    shards = tuple(
        (data.x[idx], data.y[idx]) for idx in (np.sort(rows) for rows in assigned)
    )
    return FederatedDataset(shards, data.num_classes, data.x.shape[1])


def train_test_split(
    data: FederatedDataset, test_fraction: float = 0.1, seed: int = 0
) -> tuple[FederatedDataset, tuple[np.ndarray, np.ndarray]]:
    """Hold out a seeded global test set, taken proportionally per shard.

    Each shard keeps at least one training sample. Returns the reduced
    training dataset and the pooled (features, labels) test set.
    """
    if not 0.0 <= test_fraction < 1.0:
        raise ValueError(f"test_fraction must be in [0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    train_shards, test_x, test_y = [], [], []
    for x, y in data.shards:
        n_test = min(int(len(y) * test_fraction), len(y) - 1)
        idx = rng.permutation(len(y))
        test_idx, train_idx = np.sort(idx[:n_test]), np.sort(idx[n_test:])
        train_shards.append((x[train_idx], y[train_idx]))
        if n_test:
            test_x.append(x[test_idx])
            test_y.append(y[test_idx])
    test = (
        (np.concatenate(test_x), np.concatenate(test_y))
        if test_x
        else (np.empty((0, data.dim)), np.empty(0, dtype=int))
    )
    return FederatedDataset(tuple(train_shards), data.num_classes, data.dim), test


def save_dataset(data: FederatedDataset, path) -> None:
    """Cache a federated dataset to a single .npz file."""
    arrays = {"num_classes": data.num_classes, "dim": data.dim, "n": data.n_clients}
    for k, (x, y) in enumerate(data.shards):
        arrays[f"x{k}"] = x
        arrays[f"y{k}"] = y
    np.savez_compressed(path, **arrays)


def load_dataset(path) -> FederatedDataset:
    """Load a dataset cached by :func:`save_dataset`."""
    with np.load(path) as f:
        shards = tuple(
            (f[f"x{k}"], f[f"y{k}"].astype(int)) for k in range(int(f["n"]))
        )
        return FederatedDataset(shards, int(f["num_classes"]), int(f["dim"]))
