"""Dataset ingestion, standardization, split protocols and feature weights."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from slad.errors import IngestionError, InvalidInputError, ProtocolError

logger = logging.getLogger(__name__)

DEFAULT_LABEL_COLUMN = "label"
SWAP_FRACTION = 0.05
MAX_CONTAMINATION = 0.10


@dataclass
class Dataset:
    """An N x D feature matrix with optional binary labels (1 = anomaly)."""

    features: np.ndarray
    labels: np.ndarray | None = None
    feature_names: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise InvalidInputError(f"features must be 2-D, got shape {self.features.shape}")
        if not np.all(np.isfinite(self.features)):
            raise InvalidInputError("features contain non-finite values")
        if self.labels is not None:
            self.labels = np.asarray(self.labels).astype(np.int64)
            if self.labels.shape != (self.features.shape[0],):
                raise InvalidInputError(
                    f"{self.labels.shape[0]} labels for {self.features.shape[0]} rows"
                )
            if not np.isin(self.labels, (0, 1)).all():
                raise InvalidInputError("labels must be 0 (inlier) or 1 (anomaly)")
        if not self.feature_names:
            self.feature_names = [f"x{k}" for k in range(self.features.shape[1])]
        elif len(self.feature_names) != self.features.shape[1]:
            raise InvalidInputError("feature_names length does not match column count")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> Dataset:
        idx = np.asarray(indices, dtype=np.int64)
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.features[idx], labels, list(self.feature_names))


@dataclass(frozen=True)
class SplitSpec:
    train: np.ndarray
    test: np.ndarray
    seed: int


@dataclass(frozen=True)
class FeatureWeights:
    weights: np.ndarray
    mode: str  # "correlation" or "uniform"

    @classmethod
    def uniform(cls, d: int) -> FeatureWeights:
        return cls(np.ones(d), "uniform")


@dataclass(frozen=True)
class Standardizer:
    """Per-feature z-score parameters fitted on training data."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, features: np.ndarray) -> Standardizer:
        features = np.asarray(features, dtype=np.float64)
        if features.shape[0] == 0:
            raise InvalidInputError("cannot standardize on an empty training set")
        return cls(features.mean(axis=0), features.std(axis=0))

    def transform(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        if features.shape[-1] != self.mean.shape[0]:
            raise InvalidInputError(
                f"expected {self.mean.shape[0]} features, got {features.shape[-1]}"
            )
        ok = self.std > 0
        safe = np.where(ok, self.std, 1.0)
        return np.where(ok, (features - self.mean) / safe, 0.0)


def load_csv(path, label_column: str | None = DEFAULT_LABEL_COLUMN) -> Dataset:
    """Read a headered numeric CSV.

    If ``label_column`` is given it must exist; it is removed from the
    features and returned as labels. Pass ``None`` for unlabeled files.
    """
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"{path}: no such file")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise IngestionError(f"{path}: empty file, expected a header row") from None
        label_idx = None
        if label_column is not None:
            if label_column not in header:
                raise IngestionError(
                    f"{path}: label column {label_column!r} not in header {header}"
                )
            label_idx = header.index(label_column)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise IngestionError(
                    f"{path}: row {lineno} has {len(row)} cells, header has {len(header)}"
                )
            values = []
            for col, cell in enumerate(row):
                try:
                    val = float(cell)
                except ValueError:
                    raise IngestionError(
                        f"{path}: row {lineno}, column {col + 1} ({header[col]!r}): "
                        f"cannot parse {cell!r} as a number"
                    ) from None
                if not math.isfinite(val):
                    raise IngestionError(
                        f"{path}: row {lineno}, column {col + 1} ({header[col]!r}): "
                        f"non-finite value {cell!r}"
                    )
                values.append(val)
            rows.append(values)
    arr = np.array(rows, dtype=np.float64).reshape(len(rows), len(header))
    names = list(header)
    labels = None
    if label_idx is not None:
        raw = arr[:, label_idx]
        if not np.isin(raw, (0.0, 1.0)).all():
            bad = int(np.flatnonzero(~np.isin(raw, (0.0, 1.0)))[0])
            raise IngestionError(
                f"{path}: row {bad + 2}, column {label_idx + 1} ({label_column!r}): "
                f"label must be 0 or 1, got {raw[bad]!r}"
            )
        labels = raw.astype(np.int64)
        arr = np.delete(arr, label_idx, axis=1)
        del names[label_idx]
    return Dataset(arr, labels, names)


def save_csv(dataset: Dataset, path, label_column: str = DEFAULT_LABEL_COLUMN) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        header = list(dataset.feature_names)
        if dataset.labels is not None:
            header.append(label_column)
        writer.writerow(header)
        for i in range(dataset.n):
            row = [repr(float(v)) for v in dataset.features[i]]
            if dataset.labels is not None:
                row.append(str(int(dataset.labels[i])))
            writer.writerow(row)


def standardize(train: Dataset, others: list[Dataset] = ()) -> list[Dataset]:
    """Z-score ``train`` and ``others`` with statistics of ``train``.

    Returns ``[train', *others']``. Zero-deviation features map to 0.
    """
    stats = Standardizer.fit(train.features)
    return [replace(ds, features=stats.transform(ds.features)) for ds in (train, *others)]


def split_protocol(dataset: Dataset, seed: int) -> SplitSpec:
    """Half of the inliers train; the other half plus every anomaly test."""
    if dataset.labels is None:
        raise ProtocolError("the split protocol needs labels")
    inliers = np.flatnonzero(dataset.labels == 0)
    if inliers.size == 0:
        raise ProtocolError("no inliers to train on")
    anomalies = np.flatnonzero(dataset.labels == 1)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(inliers)
    n_train = inliers.size // 2
    train = np.sort(perm[:n_train])
    test = np.sort(np.concatenate([perm[n_train:], anomalies]))
    return SplitSpec(train, test, seed)


def _synthesize(a: np.ndarray, b: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    d = a.shape[0]
    n_swap = max(1, math.ceil(SWAP_FRACTION * d))
    pos = rng.choice(d, size=n_swap, replace=False)
    child = a.copy()
    child[pos] = b[pos]
    return child


def contaminate(
    split: SplitSpec, dataset: Dataset, rate: float, seed: int
) -> tuple[SplitSpec, Dataset]:
    """Move anomalies into the training set until they make up ``rate`` of it.

    Half of the anomalies stay reserved for testing; the rest form a pool
    that feeds the training set. When the pool runs dry, new anomalies are
    synthesized by copying a random 5% of feature positions (at least one)
    from one pool anomaly into another. Synthesized rows are appended to the
    returned dataset with label 1.

    Returns:
        The contaminated split and the (possibly extended) dataset it indexes.
    """
    if not 0.0 <= rate <= MAX_CONTAMINATION:
        raise InvalidInputError(f"contamination rate must lie in [0, 0.10], got {rate}")
    if dataset.labels is None:
        raise ProtocolError("contamination needs labels")
    if rate == 0.0:
        return split, dataset
    anomalies = np.flatnonzero(dataset.labels == 1)
    if anomalies.size == 0:
        raise ProtocolError("no anomalies available to contaminate with")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(anomalies)
    n_reserved = math.ceil(perm.size / 2)
    reserved, pool = perm[:n_reserved], perm[n_reserved:]
    # a lone anomaly cannot be split; it stays in test but still seeds synthesis
    parents = pool if pool.size else reserved
    train_in = split.train[dataset.labels[split.train] == 0]
    n_needed = int(round(rate * train_in.size / (1.0 - rate)))

    moved = pool[:n_needed]
    n_synth = n_needed - moved.size
    new_rows = []
    for _ in range(n_synth):
        i, j = rng.choice(parents.size, size=2, replace=parents.size < 2)
        a, b = dataset.features[parents[i]], dataset.features[parents[j]]
        new_rows.append(_synthesize(a, b, rng))
    if new_rows:
        feats = np.vstack([dataset.features, np.array(new_rows)])
        labels = np.concatenate([dataset.labels, np.ones(n_synth, dtype=np.int64)])
        extended = Dataset(feats, labels, list(dataset.feature_names))
    else:
        extended = dataset
    synth_idx = np.arange(dataset.n, dataset.n + n_synth)
    test_in = split.test[dataset.labels[split.test] == 0]
    train = np.sort(np.concatenate([train_in, moved, synth_idx]))
    test = np.sort(np.concatenate([test_in, reserved]))
    logger.info(
        "contamination %.3f: %d pool anomalies moved, %d synthesized", rate, moved.size, n_synth
    )
    return SplitSpec(train, test, split.seed), extended


def compute_feature_weights(train_features: np.ndarray, delta: int = 50) -> FeatureWeights:
    """Mean absolute Pearson correlation of each feature with all features.

    Above ``delta`` dimensions the computation is skipped and every weight is 1.
    Correlations involving a constant feature count as 0, self term included.
    """
    x = np.asarray(train_features, dtype=np.float64)
    if x.shape[0] == 0:
        raise InvalidInputError("cannot compute feature weights on an empty training set")
    d = x.shape[1]
    if d >= delta:
        return FeatureWeights.uniform(d)
    centered = x - x.mean(axis=0)
    dev = np.sqrt((centered**2).mean(axis=0))
    ok = dev > 0
    unit = np.where(ok, centered / np.where(ok, dev, 1.0), 0.0)
    corr = np.abs(unit.T @ unit) / x.shape[0]
    corr[~ok, :] = 0.0
    corr[:, ~ok] = 0.0
    # round-off can push |corr| a hair above 1
    corr = np.minimum(corr, 1.0)
    return FeatureWeights(corr.mean(axis=1), "correlation")


def make_synthetic(
    n: int = 2000,
    outlier_fraction: float = 0.05,
    n_noise: int = 8,
    seed: int = 0,
    box_scale: float = 2.0,
    correlation: float = 0.9,
) -> Dataset:
    """Gaussian inliers in two informative dims plus standard-normal noise dims.

    Inliers in the informative plane are correlated Gaussian; outliers are
    uniform over the inlier bounding box expanded by ``box_scale``. Every
    row gets ``n_noise`` standard-normal noise features. Rows are shuffled.
    """
    if not 0 < outlier_fraction < 1:
        raise InvalidInputError("outlier_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    n_out = int(round(n * outlier_fraction))
    n_in = n - n_out
    cov = np.array([[1.0, correlation], [correlation, 1.0]])
    inl = rng.multivariate_normal(np.zeros(2), cov, size=n_in)
    half = box_scale * np.abs(inl).max(axis=0)
    out = rng.uniform(-half, half, size=(n_out, 2))
    informative = np.vstack([inl, out])
    noise = rng.standard_normal((n, n_noise))
    labels = np.concatenate([np.zeros(n_in, dtype=np.int64), np.ones(n_out, dtype=np.int64)])
    order = rng.permutation(n)
    feats = np.hstack([informative, noise])[order]
    names = ["inf0", "inf1"] + [f"noise{k}" for k in range(n_noise)]
    return Dataset(feats, labels[order], names)
