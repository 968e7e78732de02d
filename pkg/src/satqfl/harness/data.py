"""Dataset ingestion, PCA reduction and per-satellite sharding."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..qfl import LocalDataset
from .config import DatasetSpec


class SchemaError(ValueError):
    pass


class EmptyShard(ValueError):
    pass


class RankError(ValueError):
    pass


@dataclass
class DatasetSplit:
    shards: dict  # satellite id -> LocalDataset
    server_test: LocalDataset
    server_val: LocalDataset
    class_count: int
    basis: np.ndarray  # (f0, k) principal directions

    @property
    def train_size(self) -> int:
        return sum(len(s) for s in self.shards.values())

    @property
    def held_out_size(self) -> int:
        return len(self.server_val) + len(self.server_test)


# ---------------------------------------------------------------------------
# raw tables


def read_table(path, feature_count: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Numeric feature columns followed by one integer label column.

    A leading header row is skipped when it does not parse as numbers.
    """
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"no such dataset file: {path}")
    with path.open(newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if rows and not _numeric(rows[0]):
        rows = rows[1:]
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    width = len(rows[0])
    for i, r in enumerate(rows):
        if len(r) != width:
            raise SchemaError(f"{path}: row {i + 1} has {len(r)} columns, expected {width}")
        if not _numeric(r):
            raise SchemaError(f"{path}: row {i + 1} has a non-numeric cell")
    if width < 2:
        raise SchemaError(f"{path}: need at least one feature column and a label column")
    table = np.array(rows, dtype=float)
    X, y = table[:, :-1], table[:, -1]
    if feature_count is not None and X.shape[1] != feature_count:
        raise SchemaError(f"{path}: {X.shape[1]} feature columns, expected {feature_count}")
    if np.any(y != np.round(y)):
        raise SchemaError(f"{path}: labels must be integers")
    return X, y.astype(int)


def _numeric(row) -> bool:
    try:
        [float(c) for c in row]
    except ValueError:
        return False
    return True


def write_table(path, X, y) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(X.shape[1])] + ["label"])
        for row, lab in zip(X, y):
            w.writerow([repr(float(v)) for v in row] + [int(lab)])


# ---------------------------------------------------------------------------
# synthetic stand-ins


def synthetic_separable(n: int, f0: int = 4, rng=None, margin: float = 0.5, offset: float = 1.5) -> tuple[np.ndarray, np.ndarray]:
    """Two Gaussian blobs at ``+-offset`` along a random unit direction ``w``.

    Points closer than ``margin`` to the plane ``w.x = 0`` are pushed out, so
    the classes are linearly separable with a gap of ``2 * margin``.
    """
    rng = np.random.default_rng(rng)
    w = rng.normal(size=f0)
    w /= np.linalg.norm(w)
    y = np.arange(n) % 2
    rng.shuffle(y)
    sign = np.where(y == 1, 1.0, -1.0)
    X = rng.normal(size=(n, f0)) + offset * sign[:, None] * w[None, :]
    shift = np.maximum(0.0, margin - sign * (X @ w))
    X = X + (sign * shift)[:, None] * w[None, :]
    return X, y


def synthetic_eurosat(n: int = 1000, f0: int = 64, classes: int = 10, rng=None) -> tuple[np.ndarray, np.ndarray]:
    """Pre-extracted-feature stand-in: class centroids plus isotropic noise."""
    rng = np.random.default_rng(rng)
    centers = rng.normal(0.0, 3.0, size=(classes, f0))
    y = np.arange(n) % classes
    rng.shuffle(y)
    X = centers[y] + rng.normal(size=(n, f0))
    return X, y


# ---------------------------------------------------------------------------
# preprocessing


def pca_reduce(matrix, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Project centred rows onto the top-``k`` covariance eigenvectors.

    Returns ``(projected (n, k), basis (cols, k))``. Eigenvector signs are
    fixed so the largest-magnitude loading is positive.
    """
    A = np.asarray(matrix, dtype=float)
    if A.ndim != 2:
        raise RankError("pca_reduce expects a 2-D matrix")
    n, m = A.shape
    if not 1 <= k <= min(n, m):
        raise RankError(f"k={k} outside [1, min(rows, cols)={min(n, m)}]")
    centred = A - A.mean(axis=0)
    cov = centred.T @ centred / max(n - 1, 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:k]
    basis = vecs[:, order]
    flip = np.sign(basis[np.argmax(np.abs(basis), axis=0), np.arange(k)])
    basis = basis * np.where(flip == 0, 1.0, flip)
    return centred @ basis, basis


def explained_variance(projected) -> np.ndarray:
    return np.var(np.asarray(projected), axis=0, ddof=1)


def _standardize(train, other):
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (train - mu) / sd, (other - mu) / sd


def _to_angles(train, other):
    lo, hi = train.min(axis=0), train.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    a = (train - lo) / span * math.pi
    b = np.clip((other - lo) / span * math.pi, 0.0, math.pi)
    return a, b


def shard_indices(labels, satellites, policy: str = "round_robin") -> dict:
    """Disjoint index sets covering ``range(len(labels))``."""
    sats = list(satellites)
    n = len(labels)
    if len(sats) > n:
        raise EmptyShard(f"{len(sats)} satellites but only {n} training rows")
    if policy == "round_robin":
        order = np.arange(n)
        return {s: order[i :: len(sats)] for i, s in enumerate(sats)}
    if policy == "label_skew":
        # sorted by label, dealt out in contiguous blocks
        blocks = np.array_split(np.argsort(np.asarray(labels), kind="stable"), len(sats))
        return {s: np.sort(b) for s, b in zip(sats, blocks)}
    raise ValueError(f"unknown shard policy {policy!r}")


def load_dataset(spec: DatasetSpec, satellites, seed: int = 0) -> DatasetSplit:
    """Read, split 90/10 after a seeded shuffle, standardise, reduce, shard.

    The held-out part is halved into a server validation set and a server
    test set. Every statistic is fitted on the training split only.
    """
    rng = np.random.default_rng([seed, 11])
    src = spec.source
    if src.startswith("synthetic:"):
        kind = src.split(":", 1)[1]
        f0 = spec.feature_count
        if kind == "separable":
            X, y = synthetic_separable(spec.rows, f0 or spec.reduce_to, rng=np.random.default_rng([seed, 12]))
        elif kind == "eurosat":
            X, y = synthetic_eurosat(spec.rows, f0 or 64, rng=np.random.default_rng([seed, 12]))
        else:
            raise SchemaError(f"unknown synthetic source {kind!r}")
    else:
        X, y = read_table(src, spec.feature_count)
    if spec.reduce_to > X.shape[1]:
        raise RankError(f"reduce_to={spec.reduce_to} exceeds {X.shape[1]} feature columns")
    classes, y = np.unique(y, return_inverse=True)
    perm = rng.permutation(len(y))
    n_train = int(round(spec.train_fraction * len(y)))
    if n_train < 1 or n_train >= len(y):
        raise SchemaError(f"train_fraction {spec.train_fraction} leaves an empty split of {len(y)} rows")
    tr, te = perm[:n_train], perm[n_train:]
    a, b = _standardize(X[tr], X[te])
    centre = a.mean(axis=0)
    a, basis = pca_reduce(a, spec.reduce_to)
    b = (b - centre) @ basis
    a, b = _to_angles(a, b)
    idx = shard_indices(y[tr], satellites, spec.distribution)
    shards = {s: LocalDataset(a[i], y[tr][i], s) for s, i in idx.items()}
    half = len(te) // 2
    server_val = LocalDataset(b[:half], y[te][:half], "server_val")
    server_test = LocalDataset(b[half:], y[te][half:], "server_test")
    return DatasetSplit(shards, server_test, server_val, len(classes), basis)
