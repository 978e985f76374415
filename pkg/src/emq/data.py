"""Dataset ingestion, standardization, seeded splits and synthetic generators."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .quantiles import normal_cdf, normal_quantile

log = logging.getLogger(__name__)

MIN_ROWS = 10


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    columns: list = field(default_factory=list)
    source: str = ""
    label_name: str = "y"
    dropped_rows: int = 0

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64).reshape(-1)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.size:
            raise DataError("features must be n x d with one label per row")
        if not self.columns:
            self.columns = [f"x{j + 1}" for j in range(self.features.shape[1])]

    @property
    def n(self) -> int:
        return self.labels.size

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return replace(self, features=self.features[idx], labels=self.labels[idx], dropped_rows=0)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.features).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()[:16]


def load_csv(path, label_column=-1, header: bool = True) -> Dataset:
    """Read a numeric CSV. ``label_column`` is a column name or an index."""
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            rows = [r for r in csv.reader(fh) if r]
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if header:
        if not rows:
            raise DataError(f"{path} is empty")
        names, rows = [c.strip() for c in rows[0]], rows[1:]
    else:
        names = [f"c{j}" for j in range(len(rows[0]))] if rows else []
    if not rows:
        raise DataError(f"{path} has no data rows")
    width = len(names)
    label_idx = _resolve_column(label_column, names)

    values = np.empty((len(rows), width))
    for i, row in enumerate(rows):
        if len(row) != width:
            raise DataError(f"row {i + 1} has {len(row)} fields, expected {width}")
        for j, cell in enumerate(row):
            cell = cell.strip()
            if cell == "" or cell.lower() in ("na", "nan", "null", "?"):
                values[i, j] = np.nan
                continue
            try:
                values[i, j] = float(cell)
            except ValueError:
                raise DataError(f"column {names[j]!r} is not numeric (row {i + 1}: {cell!r})") from None

    keep = np.all(np.isfinite(values), axis=1)
    dropped = int((~keep).sum())
    if dropped:
        log.warning("dropped %d rows with missing or non-finite values from %s", dropped, path)
    values = values[keep]
    if values.shape[0] < MIN_ROWS:
        raise DataError(f"{path} has {values.shape[0]} usable rows, need at least {MIN_ROWS}")
    feat_idx = [j for j in range(width) if j != label_idx]
    return Dataset(values[:, feat_idx], values[:, label_idx], [names[j] for j in feat_idx],
                   source=str(path), label_name=names[label_idx], dropped_rows=dropped)


def _resolve_column(label_column, names) -> int:
    if isinstance(label_column, str) and not label_column.lstrip("-").isdigit():
        if label_column not in names:
            raise DataError(f"label column {label_column!r} not found; columns are {names}")
        return names.index(label_column)
    idx = int(label_column)
    if not -len(names) <= idx < len(names):
        raise DataError(f"label column index {idx} out of range for {len(names)} columns")
    return idx % len(names)


@dataclass
class NormStats:
    feature_mean: np.ndarray
    feature_std: np.ndarray
    label_mean: float
    label_std: float
    kept_columns: list

    def transform_features(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)[:, self.kept_columns]
        return (X - self.feature_mean) / self.feature_std

    def transform_labels(self, y) -> np.ndarray:
        return (np.asarray(y, dtype=np.float64) - self.label_mean) / self.label_std

    def inverse_labels(self, y) -> np.ndarray:
        return np.asarray(y, dtype=np.float64) * self.label_std + self.label_mean

    def apply(self, ds: Dataset) -> Dataset:
        return replace(ds, features=self.transform_features(ds.features),
                       labels=self.transform_labels(ds.labels),
                       columns=[ds.columns[j] for j in self.kept_columns])

    def to_dict(self) -> dict:
        return {"feature_mean": self.feature_mean.tolist(), "feature_std": self.feature_std.tolist(),
                "label_mean": self.label_mean, "label_std": self.label_std,
                "kept_columns": list(self.kept_columns)}

    @classmethod
    def from_dict(cls, d) -> "NormStats":
        return cls(np.asarray(d["feature_mean"], dtype=np.float64),
                   np.asarray(d["feature_std"], dtype=np.float64),
                   float(d["label_mean"]), float(d["label_std"]), list(d["kept_columns"]))

    @classmethod
    def identity(cls, d: int) -> "NormStats":
        return cls(np.zeros(d), np.ones(d), 0.0, 1.0, list(range(d)))


def standardize(train: Dataset, apply_to=()) -> tuple[NormStats, list]:
    """Fit mean/std (divisor n-1) on ``train``; constant feature columns are dropped."""
    if train.n < 2:
        raise DataError("need at least two training rows to standardize")
    mean = train.features.mean(axis=0)
    std = train.features.std(axis=0, ddof=1)
    kept = [j for j in range(train.d) if std[j] > 0.0]
    for j in range(train.d):
        if j not in kept:
            log.warning("dropping constant feature column %r", train.columns[j])
    if not kept:
        raise DataError("every feature column is constant")
    label_std = float(train.labels.std(ddof=1))
    if label_std <= 0.0:
        raise DataError("label column is constant")
    stats = NormStats(mean[kept], std[kept], float(train.labels.mean()), label_std, kept)
    return stats, [stats.apply(ds) for ds in apply_to]


@dataclass(frozen=True)
class SplitIndices:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def to_dict(self) -> dict:
        return {"train": self.train.tolist(), "val": self.val.tolist(), "test": self.test.tolist()}

    @classmethod
    def from_dict(cls, d) -> "SplitIndices":
        return cls(*(np.asarray(d[k], dtype=np.int64) for k in ("train", "val", "test")))

    def digest(self) -> str:
        h = hashlib.sha256()
        for part in (self.train, self.val, self.test):
            h.update(np.asarray(part, dtype="<i8").tobytes())
            h.update(b"|")
        return h.hexdigest()[:16]


def _cut(size: int, fraction: float) -> int:
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"split fraction must lie in (0, 1), got {fraction}")
    k = int(round(size * fraction))
    if k < 1 or k >= size:
        raise ConfigError(f"fraction {fraction} of {size} rows leaves an empty side")
    return k


def split_indices(n: int, test_fraction: float, seed: int, val_fraction: float = 0.2) -> SplitIndices:
    """Seeded test split, then a nested validation split of the training portion."""
    n_test = _cut(n, test_fraction)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED]))
    perm = rng.permutation(n)
    test, rest = np.sort(perm[:n_test]), perm[n_test:]
    n_val = _cut(rest.size, val_fraction)
    return SplitIndices(np.sort(rest[n_val:]), np.sort(rest[:n_val]), test)


def split(dataset: Dataset, test_fraction: float, seed: int, val_fraction: float = 0.2):
    """Return (train, val, test) datasets and the indices used."""
    idx = split_indices(dataset.n, test_fraction, seed, val_fraction)
    return dataset.subset(idx.train), dataset.subset(idx.val), dataset.subset(idx.test), idx


# Synthetic generators with known conditional laws.

SYNTHETIC_KINDS = ("hetero-gaussian", "skewed", "bimodal")
_SKEW_SCALE = 0.5
_SKEW_MEAN = math.exp(0.5 * _SKEW_SCALE ** 2)
_BIMODAL_SHIFT = 2.0
_BIMODAL_NOISE = 0.3


class SyntheticLaw:
    """Conditional law of y given x for one synthetic kind."""

    def __init__(self, kind: str):
        if kind not in SYNTHETIC_KINDS:
            raise ConfigError(f"unknown synthetic kind {kind!r}; choose from {SYNTHETIC_KINDS}")
        self.kind = kind

    def sample(self, X, rng) -> np.ndarray:
        x1, x2 = X[:, 0], X[:, 1]
        eps = rng.standard_normal(len(X))
        if self.kind == "hetero-gaussian":
            return x1 + (1.0 + np.abs(x2)) * eps
        if self.kind == "skewed":
            return x1 + np.exp(_SKEW_SCALE * eps) - _SKEW_MEAN
        s = np.where(rng.random(len(X)) < _mix_weight(x2), 1.0, -1.0)
        return x1 + _BIMODAL_SHIFT * s + _BIMODAL_NOISE * eps

    def cdf(self, y, X) -> np.ndarray:
        x1, x2 = X[:, 0], X[:, 1]
        if self.kind == "hetero-gaussian":
            return normal_cdf((y - x1) / (1.0 + np.abs(x2)))
        if self.kind == "skewed":
            v = y - x1 + _SKEW_MEAN
            out = np.zeros_like(v)
            pos = v > 0
            out[pos] = normal_cdf(np.log(v[pos]) / _SKEW_SCALE)
            return out
        p = _mix_weight(x2)
        return (p * normal_cdf((y - x1 - _BIMODAL_SHIFT) / _BIMODAL_NOISE)
                + (1.0 - p) * normal_cdf((y - x1 + _BIMODAL_SHIFT) / _BIMODAL_NOISE))

    def quantile(self, tau, X) -> np.ndarray:
        """True conditional tau-quantile, one value per row of X."""
        x1, x2 = X[:, 0], X[:, 1]
        tau = np.broadcast_to(np.asarray(tau, dtype=np.float64), x1.shape)
        if self.kind == "hetero-gaussian":
            return x1 + (1.0 + np.abs(x2)) * normal_quantile(tau)
        if self.kind == "skewed":
            return x1 + np.exp(_SKEW_SCALE * normal_quantile(tau)) - _SKEW_MEAN
        return self._invert(tau, X)

    def _invert(self, tau, X, iters: int = 200) -> np.ndarray:
        # bracket covers both mixture components far into their tails
        lo = X[:, 0] - _BIMODAL_SHIFT - 40.0 * _BIMODAL_NOISE
        hi = X[:, 0] + _BIMODAL_SHIFT + 40.0 * _BIMODAL_NOISE
        for _ in range(iters):
            mid = 0.5 * (lo + hi)
            below = self.cdf(mid, X) < tau
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
            if np.all(hi - lo <= 1e-14 * np.maximum(1.0, np.abs(mid))):
                break
        return 0.5 * (lo + hi)

    def quantile_matrix(self, X, taus) -> np.ndarray:
        return np.column_stack([self.quantile(t, X) for t in taus])


def _mix_weight(x2):
    return 1.0 / (1.0 + np.exp(-2.0 * x2))


def synthesize(kind: str, n: int, seed: int) -> Dataset:
    """Draw x ~ U(-2, 2)^2 and y from the named conditional law."""
    law = SyntheticLaw(kind)
    if n < MIN_ROWS:
        raise DataError(f"need n >= {MIN_ROWS}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), SYNTHETIC_KINDS.index(kind)]))
    X = rng.uniform(-2.0, 2.0, size=(n, 2))
    y = law.sample(X, rng)
    return Dataset(X, y, ["x1", "x2"], source=f"synthetic:{kind}:n={n}:seed={seed}")
