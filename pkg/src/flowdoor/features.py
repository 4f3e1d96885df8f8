"""Fixed-order flow feature vectors, normalization, and dataset splitting.

The 42-entry layout is frozen: [protocol, duration], then for each direction
(fwd, bwd) packet count, total bytes, length min/max/mean/stdev, inter-arrival
min/max/mean/stdev and the six TCP flag counts, then per direction the TTL
min/max/mean/stdev. Explainability and backdoor checks address features by
index, so the order is written into every dataset artifact header.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, ParseError, SplitError
from .traffic import FLAG_NAMES

PROTOCOL_TCP = 6.0

_STAT_COLS = ["min_len", "max_len", "mean_len", "stdev_len",
              "min_iat", "max_iat", "mean_iat", "stdev_iat"]


def _build_feature_names():
    names = ["protocol", "duration"]
    for d in ("fwd", "bwd"):
        names += [f"{d}_pkt_count", f"{d}_bytes"]
        names += [f"{d}_{c}" for c in _STAT_COLS]
        names += [f"{d}_{fl.lower()}_count" for fl in FLAG_NAMES]
    for d in ("fwd", "bwd"):
        names += [f"{d}_min_ttl", f"{d}_max_ttl", f"{d}_mean_ttl", f"{d}_stdev_ttl"]
    return names


FEATURE_NAMES = _build_feature_names()
N_FEATURES = len(FEATURE_NAMES)          # 42
FEATURE_INDEX = {n: i for i, n in enumerate(FEATURE_NAMES)}


@dataclass
class Dataset:
    X: np.ndarray                         # (n, 42) float64
    y: np.ndarray                         # (n,) int, 0 benign / 1 attack
    bd: np.ndarray                        # (n,) bool, backdoor indicator
    feature_names: list = field(default_factory=lambda: list(FEATURE_NAMES))

    def __post_init__(self):
        if len(self.y) != len(self.X) or len(self.bd) != len(self.X):
            raise DimensionError("X, y, bd row counts differ")

    def __len__(self):
        return len(self.X)

    def subset(self, idx):
        return Dataset(self.X[idx], self.y[idx], self.bd[idx], list(self.feature_names))


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray                       # population std; 0 marks constant columns


@dataclass(frozen=True)
class SplitSpec:
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray
    seed: int


def _stats4(values):
    """(min, max, mean, population stdev); zeros when empty."""
    if len(values) == 0:
        return 0.0, 0.0, 0.0, 0.0
    v = np.asarray(values, dtype=float)
    return float(v.min()), float(v.max()), float(v.mean()), float(v.std())


def extract_features(flow) -> np.ndarray:
    """Map one flow to the fixed 42-entry vector.

    Directions with no packets yield all-zero statistics; single-packet
    directions yield zero stdev and zero inter-arrival stats.
    """
    if not flow.packets:
        raise ValueError("flow has no packets")
    vec = np.zeros(N_FEATURES)
    vec[0] = PROTOCOL_TCP
    vec[1] = flow.packets[-1].ts - flow.packets[0].ts

    pos = 2
    by_dir = {"fwd": [], "bwd": []}
    for p in flow.packets:
        by_dir[p.dir].append(p)
    for d in ("fwd", "bwd"):
        pkts = by_dir[d]
        vec[pos] = len(pkts)
        vec[pos + 1] = sum(p.len for p in pkts)
        vec[pos + 2:pos + 6] = _stats4([p.len for p in pkts])
        ts = [p.ts for p in pkts]
        iats = [b - a for a, b in zip(ts, ts[1:])]
        vec[pos + 6:pos + 10] = _stats4(iats)
        for k, fl in enumerate(FLAG_NAMES):
            vec[pos + 10 + k] = sum(1 for p in pkts if fl in p.flags)
        pos += 16
    for d in ("fwd", "bwd"):
        vec[pos:pos + 4] = _stats4([p.ttl for p in by_dir[d]])
        pos += 4
    return vec


def dataset_from_flows(flows) -> Dataset:
    X = np.empty((len(flows), N_FEATURES))
    y = np.empty(len(flows), dtype=int)
    bd = np.empty(len(flows), dtype=bool)
    for i, flow in enumerate(flows):
        X[i] = extract_features(flow)
        y[i] = flow.label
        bd[i] = flow.backdoored
    return Dataset(X, y, bd)


# --- Z-score normalization ---------------------------------------------------

def zscore_fit(train: Dataset) -> NormStats:
    if len(train) == 0:
        raise ValueError("cannot fit normalization on an empty dataset")
    return NormStats(mean=train.X.mean(axis=0), std=train.X.std(axis=0))


def zscore_apply(stats: NormStats, ds: Dataset) -> Dataset:
    X = zscore_transform(stats, ds.X)
    return Dataset(X, ds.y.copy(), ds.bd.copy(), list(ds.feature_names))


def zscore_transform(stats: NormStats, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.shape[-1] != stats.mean.shape[0]:
        raise DimensionError(f"matrix has {X.shape[-1]} columns, stats expect {stats.mean.shape[0]}")
    # Constant columns carry no information; map them to 0 instead of NaN.
    safe = np.where(stats.std > 0, stats.std, 1.0)
    return np.where(stats.std > 0, (X - stats.mean) / safe, 0.0)


def zscore_invert(stats: NormStats, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.shape[-1] != stats.mean.shape[0]:
        raise DimensionError(f"matrix has {X.shape[-1]} columns, stats expect {stats.mean.shape[0]}")
    return X * stats.std + stats.mean


# --- Splits ------------------------------------------------------------------

def split(ds: Dataset, seed: int) -> SplitSpec:
    """Stratified train/validation/test split with val = test = train/4.

    Per class, a sixth of the rows (rounded down) goes to validation and
    another sixth to test; the rest is training data.
    """
    if len(ds) < 6:
        raise SplitError("need at least 6 rows to split")
    rng = np.random.default_rng(seed)
    tr, va, te = [], [], []
    for cls in np.unique(ds.y):
        idx = np.flatnonzero(ds.y == cls)
        if len(idx) < 6:
            raise SplitError(f"class {cls} has only {len(idx)} rows, need >= 6")
        idx = rng.permutation(idx)
        k = len(idx) // 6
        va.append(idx[:k])
        te.append(idx[k:2 * k])
        tr.append(idx[2 * k:])
    return SplitSpec(train=np.sort(np.concatenate(tr)),
                     validation=np.sort(np.concatenate(va)),
                     test=np.sort(np.concatenate(te)),
                     seed=seed)


def kfold(ds: Dataset, k: int = 3, seed: int = 0):
    """Stratified k-fold; returns [(train_idx, test_idx), ...]."""
    if k < 2:
        raise SplitError("k must be >= 2")
    if k > len(ds):
        raise SplitError(f"k={k} exceeds {len(ds)} rows")
    rng = np.random.default_rng(seed)
    folds = [[] for _ in range(k)]
    for cls in np.unique(ds.y):
        idx = rng.permutation(np.flatnonzero(ds.y == cls))
        for i, row in enumerate(idx):
            folds[i % k].append(row)
    folds = [np.sort(np.array(f, dtype=int)) for f in folds]
    out = []
    for i in range(k):
        test_idx = folds[i]
        train_idx = np.sort(np.concatenate([folds[j] for j in range(k) if j != i]))
        out.append((train_idx, test_idx))
    return out


# --- CSV persistence ---------------------------------------------------------

CSV_HEADER = FEATURE_NAMES + ["label", "backdoored"]


def write_dataset_csv(ds: Dataset, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for i in range(len(ds)):
            row = [repr(float(v)) for v in ds.X[i]]
            w.writerow(row + [int(ds.y[i]), int(ds.bd[i])])


def read_dataset_csv(path) -> Dataset:
    """Read a dataset CSV; also the escape hatch for externally extracted features."""
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        try:
            header = next(r)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        if header != CSV_HEADER:
            raise ParseError(f"{path}:1: header does not match the frozen feature layout")
        X, y, bd = [], [], []
        for lineno, row in enumerate(r, start=2):
            if not row:
                continue
            if len(row) != len(CSV_HEADER):
                raise ParseError(f"{path}:{lineno}: expected {len(CSV_HEADER)} fields, got {len(row)}")
            try:
                X.append([float(v) for v in row[:N_FEATURES]])
                y.append(int(row[N_FEATURES]))
                bd.append(bool(int(row[N_FEATURES + 1])))
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
    if not X:
        raise ParseError(f"{path}: no data rows")
    return Dataset(np.array(X), np.array(y, dtype=int), np.array(bd, dtype=bool))
