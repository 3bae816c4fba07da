"""Datasets, non-IID partitioning and the two corruption protocols."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


class DataError(ValueError):
    """Malformed dataset input; ``row`` is 1-based over data rows when known."""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


@dataclass
class Dataset:
    """Features ``X [n, d]``, labels ``y [n]`` and optional group tags."""

    X: np.ndarray
    y: np.ndarray
    num_classes: int
    groups: np.ndarray | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2:
            raise DataError(f"features must be 2-D, got shape {self.X.shape}")
        n = self.X.shape[0]
        if n < 1:
            raise DataError("dataset is empty")
        if self.y.shape != (n,):
            raise DataError(f"{n} feature rows but {self.y.shape} labels")
        if self.num_classes < 1:
            raise DataError("num_classes must be positive")
        if not np.isfinite(self.X).all():
            raise DataError("non-finite feature", int(np.flatnonzero(~np.isfinite(self.X).all(1))[0]) + 1)
        bad = np.flatnonzero((self.y < 0) | (self.y >= self.num_classes))
        if bad.size:
            raise DataError(
                f"label {self.y[bad[0]]} outside [0, {self.num_classes})", int(bad[0]) + 1
            )
        if self.groups is not None:
            self.groups = np.asarray(self.groups, dtype=np.int64)
            if self.groups.shape != (n,):
                raise DataError("group tags do not match sample count")

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.X.shape[1]

    def subset(self, indices: Sequence[int] | np.ndarray) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        groups = None if self.groups is None else self.groups[idx]
        return Dataset(self.X[idx], self.y[idx], self.num_classes, groups)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.num_classes)

    def equals(self, other: "Dataset") -> bool:
        if self.num_classes != other.num_classes:
            return False
        if (self.groups is None) != (other.groups is None):
            return False
        same_groups = self.groups is None or np.array_equal(self.groups, other.groups)
        return np.array_equal(self.X, other.X) and np.array_equal(self.y, other.y) and same_groups


def class_means(num_classes: int, dim: int, separation: float = 2.0 * math.sqrt(2.0)) -> np.ndarray:
    """Seed-independent class centres with pairwise distance ``separation``
    between neighbours.

    With ``dim >= num_classes`` the centres form a centred regular simplex;
    otherwise they sit on a circle (or a line when ``dim == 1``).
    """
    means = np.zeros((num_classes, dim))
    if dim >= num_classes:
        eye = np.eye(num_classes)
        simplex = eye - eye.mean(axis=0)
        means[:, :num_classes] = simplex * (separation / math.sqrt(2.0))
    elif dim >= 2:
        radius = separation / (2.0 * math.sin(math.pi / num_classes))
        angles = 2.0 * math.pi * np.arange(num_classes) / num_classes
        means[:, 0] = radius * np.cos(angles)
        means[:, 1] = radius * np.sin(angles)
    else:
        means[:, 0] = separation * (np.arange(num_classes) - (num_classes - 1) / 2.0)
    return means


def synth_gaussian_mixture(
    num_classes: int,
    dim: int,
    n_per_class: int,
    cluster_spread: float,
    seed: int,
    n_groups: int | None = None,
) -> Dataset:
    """Isotropic Gaussian blobs around :func:`class_means`.

    Samples are emitted class by class. When ``n_groups`` is given every
    sample gets a uniformly drawn group tag, standing in for speaker ids.
    """
    if num_classes < 2:
        raise ValueError("need at least two classes")
    if dim < 1 or n_per_class < 1:
        raise ValueError("dim and n_per_class must be positive")
    if cluster_spread < 0:
        raise ValueError("cluster_spread must be non-negative")
    rng = np.random.default_rng(seed)
    means = class_means(num_classes, dim)
    y = np.repeat(np.arange(num_classes), n_per_class)
    X = means[y] + cluster_spread * rng.standard_normal((len(y), dim))
    groups = None
    if n_groups is not None:
        groups = rng.integers(0, n_groups, size=len(y))
    return Dataset(X, y, num_classes, groups)


# --- partitioning ------------------------------------------------------------


@dataclass
class PartitionPlan:
    client_indices: list[list[int]]
    strategy: str
    seed: int = 0
    alpha: float | None = None

    @property
    def num_clients(self) -> int:
        return len(self.client_indices)

    def to_json(self) -> str:
        doc: dict = {"strategy": self.strategy}
        if self.alpha is not None:
            doc["alpha"] = self.alpha
        doc["seed"] = self.seed
        doc["clients"] = [[int(i) for i in idx] for idx in self.client_indices]
        return json.dumps(doc, separators=(",", ":")) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "PartitionPlan":
        doc = json.loads(text)
        return cls(
            [list(map(int, c)) for c in doc["clients"]],
            doc["strategy"],
            int(doc.get("seed", 0)),
            doc.get("alpha"),
        )

    def validate(self, n: int) -> None:
        """Check disjointness, full coverage of ``range(n)`` and non-empty clients."""
        seen = np.zeros(n, dtype=np.int64)
        for k, idx in enumerate(self.client_indices):
            if not idx:
                raise ValueError(f"client {k} is empty")
            arr = np.asarray(idx, dtype=np.int64)
            if arr.min() < 0 or arr.max() >= n:
                raise ValueError(f"client {k} holds an index outside [0, {n})")
            np.add.at(seen, arr, 1)
        if (seen > 1).any():
            raise ValueError(f"index {int(np.flatnonzero(seen > 1)[0])} assigned twice")
        if (seen == 0).any():
            raise ValueError(f"index {int(np.flatnonzero(seen == 0)[0])} unassigned")


def largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to ``total``, proportional to ``proportions``.

    Ties in the remainders go to the lower index.
    """
    p = np.asarray(proportions, dtype=np.float64)
    quotas = p / p.sum() * total
    counts = np.floor(quotas).astype(np.int64)
    short = total - int(counts.sum())
    if short:
        order = np.argsort(-(quotas - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(ds: Dataset, num_clients: int, alpha: float, seed: int) -> PartitionPlan:
    """Label-skewed split: per class, client shares ~ Dirichlet(alpha * 1).

    Shares are turned into counts by largest-remainder rounding so every
    sample is assigned. A client left empty takes one sample from the
    currently largest client (ties -> lowest client id).
    """
    if num_clients < 2:
        raise ValueError("dirichlet partition needs at least two clients")
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if num_clients > len(ds):
        raise ValueError(f"{num_clients} clients but only {len(ds)} samples")
    rng = np.random.default_rng(seed)
    buckets: list[list[int]] = [[] for _ in range(num_clients)]
    for c in range(ds.num_classes):
        members = np.flatnonzero(ds.y == c)
        props = rng.dirichlet(np.full(num_clients, alpha))
        if not np.isfinite(props).all() or props.sum() <= 0:
            # extreme alpha can underflow every share to zero
            props = np.zeros(num_clients)
            props[rng.integers(num_clients)] = 1.0
        members = rng.permutation(members)
        counts = largest_remainder(props, len(members))
        start = 0
        for k, cnt in enumerate(counts):
            buckets[k].extend(members[start : start + cnt].tolist())
            start += cnt
    for k in range(num_clients):
        if not buckets[k]:
            donor = max(range(num_clients), key=lambda j: (len(buckets[j]), -j))
            buckets[k].append(buckets[donor].pop())
    return PartitionPlan([sorted(b) for b in buckets], "dirichlet", seed, alpha)


def iid_partition(ds: Dataset, num_clients: int, seed: int) -> PartitionPlan:
    """Uniform shuffle split into near-equal shards."""
    if num_clients > len(ds):
        raise ValueError(f"{num_clients} clients but only {len(ds)} samples")
    perm = np.random.default_rng(seed).permutation(len(ds))
    shards = np.array_split(perm, num_clients)
    return PartitionPlan([sorted(s.tolist()) for s in shards], "iid", seed)


def group_partition(ds: Dataset) -> PartitionPlan:
    """One client per distinct group tag, clients ordered by ascending tag."""
    if ds.groups is None:
        raise ValueError("dataset carries no group tags")
    clients = [np.flatnonzero(ds.groups == g).tolist() for g in np.unique(ds.groups)]
    return PartitionPlan(clients, "group_id", 0)


def split_indices(n: int, test_fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Seeded shuffle split; the test part has ``floor(test_fraction * n)``
    entries but never leaves the train part empty."""
    perm = rng.permutation(n)
    n_test = min(int(math.floor(test_fraction * n)), n - 1)
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


# --- corruption --------------------------------------------------------------

CLEAN_SNR_DB = 100.0


def inject_gaussian_noise(ds: Dataset, snr_db: float, seed: int) -> Dataset:
    """Additive white Gaussian noise at a target signal-to-noise ratio.

    Signal power is the mean squared feature entry over the whole dataset,
    so one noise variance applies to every entry. ``snr_db >= 100`` is the
    clean condition and returns an unmodified copy.
    """
    if snr_db >= CLEAN_SNR_DB:
        return ds.subset(np.arange(len(ds)))
    noise_var = noise_variance(ds.X, snr_db)
    rng = np.random.default_rng(seed)
    X = ds.X + math.sqrt(noise_var) * rng.standard_normal(ds.X.shape)
    return Dataset(X, ds.y.copy(), ds.num_classes, None if ds.groups is None else ds.groups.copy())


def noise_variance(X: np.ndarray, snr_db: float) -> float:
    signal_power = float(np.mean(np.square(X)))
    return signal_power / 10.0 ** (snr_db / 10.0)


def inject_label_errors(ds: Dataset, rate: float, seed: int) -> Dataset:
    """Relabel exactly ``floor(rate * n)`` samples, chosen without
    replacement, to a uniformly drawn different class."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must lie in [0, 1], got {rate}")
    if ds.num_classes < 2:
        raise ValueError("label errors need at least two classes")
    rng = np.random.default_rng(seed)
    n_flip = int(math.floor(rate * len(ds) + 1e-9))
    y = ds.y.copy()
    chosen = rng.choice(len(ds), size=n_flip, replace=False)
    # shift by 1..C-1 so the new label always differs
    shift = rng.integers(1, ds.num_classes, size=n_flip)
    y[chosen] = (y[chosen] + shift) % ds.num_classes
    return Dataset(ds.X.copy(), y, ds.num_classes, None if ds.groups is None else ds.groups.copy())


# --- CSV ---------------------------------------------------------------------
#
# Header row required. Every column except "label" and an optional "group"
# holds a real feature; "label" must be the last column unless "group"
# follows it. Without a "label" header the last column is the label.


def load_feature_csv(path: str | Path, num_classes: int | None = None) -> Dataset:
    """Read a feature table; ``num_classes`` defaults to ``max(label) + 1``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError("empty file, header row required") from None
        rows = [(i, r) for i, r in enumerate(reader, start=1) if r and any(c.strip() for c in r)]
    names = [h.lower() for h in header]
    group_col = names.index("group") if "group" in names else None
    label_col = names.index("label") if "label" in names else None
    if label_col is None:
        label_col = max(i for i in range(len(header)) if i != group_col)
    feat_cols = [i for i in range(len(header)) if i not in (label_col, group_col)]
    if not feat_cols:
        raise DataError("no feature columns")
    if not rows:
        raise DataError("no data rows")

    X = np.empty((len(rows), len(feat_cols)))
    y = np.empty(len(rows), dtype=np.int64)
    groups = np.empty(len(rows), dtype=np.int64) if group_col is not None else None
    for j, (row_no, row) in enumerate(rows):
        if len(row) != len(header):
            raise DataError(f"expected {len(header)} fields, got {len(row)}", row_no)
        try:
            X[j] = [float(row[i]) for i in feat_cols]
        except ValueError as exc:
            raise DataError(f"non-numeric feature ({exc})", row_no) from None
        if not np.isfinite(X[j]).all():
            raise DataError("non-finite feature", row_no)
        y[j] = _parse_int(row[label_col], "label", row_no)
        if groups is not None:
            groups[j] = _parse_int(row[group_col], "group", row_no)
    if num_classes is None:
        num_classes = int(y.max()) + 1
    bad = np.flatnonzero((y < 0) | (y >= num_classes))
    if bad.size:
        raise DataError(
            f"label {y[bad[0]]} outside [0, {num_classes})", rows[int(bad[0])][0]
        )
    return Dataset(X, y, num_classes, groups)


def _parse_int(text: str, what: str, row_no: int) -> int:
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"non-numeric {what} {text!r}", row_no) from None
    if not value.is_integer():
        raise DataError(f"{what} {text!r} is not an integer", row_no)
    return int(value)


def write_feature_csv(ds: Dataset, path: str | Path) -> None:
    header = [f"x{i}" for i in range(ds.feature_dim)] + ["label"]
    if ds.groups is not None:
        header.append("group")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(len(ds)):
            row = [repr(float(v)) for v in ds.X[i]] + [int(ds.y[i])]
            if ds.groups is not None:
                row.append(int(ds.groups[i]))
            w.writerow(row)


def label_entropy(labels: np.ndarray, num_classes: int) -> float:
    """Shannon entropy (nats) of a label histogram."""
    counts = np.bincount(labels, minlength=num_classes).astype(np.float64)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())
