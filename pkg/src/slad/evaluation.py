"""Ranking metrics, per-epoch loss distributions and single-dataset experiments."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from slad.data import Dataset, contaminate, split_protocol
from slad.errors import MetricError
from slad.model import SladModel, TrainConfig, sample_losses, score_batch, train

logger = logging.getLogger(__name__)

QUANTILES = (0.0, 0.25, 0.5, 0.75, 1.0)


def _check(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise MetricError(f"{scores.shape[0]} scores for {labels.shape[0]} labels")
    n_pos = int((labels == 1).sum())
    if n_pos == 0 or n_pos == labels.size:
        raise MetricError("both classes must be present")
    return scores, labels


def _midranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    sx = x[order]
    ranks = np.empty(x.size)
    start = 0
    # walk runs of equal values and give every member the run's mean rank
    boundaries = np.flatnonzero(np.diff(sx)) + 1
    for end in (*boundaries, x.size):
        ranks[order[start:end]] = 0.5 * (start + 1 + end)
        start = end
    return ranks


def auc_roc(scores, labels) -> float:
    """Probability that a random anomaly outscores a random inlier (ties 1/2)."""
    scores, labels = _check(scores, labels)
    ranks = _midranks(scores)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_pr(scores, labels) -> float:
    """Average precision over the ranking by descending score.

    Ties are broken by ascending index so the value is deterministic, and
    the precisions are summed with ``math.fsum`` so the result does not
    depend on summation order.
    """
    scores, labels = _check(scores, labels)
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    precision = np.cumsum(hits) / np.arange(1, hits.size + 1)
    return math.fsum(precision[hits == 1].tolist()) / int(hits.sum())


@dataclass
class MetricReport:
    auc_roc: float
    auc_pr: float
    n_inliers: int
    n_anomalies: int
    seed: int
    config: dict = field(default_factory=dict)

    @classmethod
    def from_scores(cls, scores, labels, seed: int, config: dict | None = None) -> MetricReport:
        labels = np.asarray(labels)
        return cls(
            auc_roc(scores, labels),
            auc_pr(scores, labels),
            int((labels == 0).sum()),
            int((labels == 1).sum()),
            seed,
            dict(config or {}),
        )

    def to_dict(self) -> dict:
        return asdict(self)


def summarize(reports: list[MetricReport]) -> dict:
    """Mean and sample standard deviation of each metric across runs."""
    out = {"n_runs": len(reports), "seeds": [r.seed for r in reports]}
    for key in ("auc_roc", "auc_pr"):
        vals = np.array([getattr(r, key) for r in reports])
        out[key] = {
            "mean": float(vals.mean()),
            "std": float(vals.std(ddof=1)) if vals.size > 1 else 0.0,
            "values": vals.tolist(),
        }
    return out


class LossDistributionRecorder:
    """Epoch callback collecting per-class quantiles of test losses.

    The loss of a test instance is the mean loss over its ``r_eval``
    generated scale samples. Rows are ``(epoch, class, q0, q1, q2, q3, q4)``.
    """

    def __init__(self, test: Dataset, seed: int = 0, r_eval: int | None = None, every: int = 1):
        if test.labels is None:
            raise MetricError("loss distributions need labeled test data")
        self.test = test
        self.seed = seed
        self.r_eval = r_eval
        self.every = every
        self.rows: list[tuple] = []
        self.last: dict[str, np.ndarray] = {}
        self.last_epoch: int | None = None
        self.last_samples: list[np.ndarray] = []

    def instance_losses(self, model: SladModel) -> np.ndarray:
        self.last_samples = [sample_losses(model, x, self.r_eval, self.seed) for x in self.test.features]
        return np.array([s.mean() for s in self.last_samples])

    def record(self, epoch: int, model: SladModel) -> None:
        losses = self.instance_losses(model)
        self.last_epoch = epoch
        for name, lab in (("inlier", 0), ("anomaly", 1)):
            vals = losses[self.test.labels == lab]
            if vals.size == 0:
                continue
            self.last[name] = vals
            self.rows.append((epoch, name, *np.quantile(vals, QUANTILES).tolist()))

    def __call__(self, epoch: int, model: SladModel) -> None:
        if epoch % self.every == 0 or epoch == model.config.epochs:
            self.record(epoch, model)

    def median(self, name: str) -> float:
        return float(np.median(self.last[name]))

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "class", "q0", "q1", "q2", "q3", "q4"])
            for row in self.rows:
                writer.writerow([row[0], row[1], *(repr(float(v)) for v in row[2:])])


def loss_distribution_report(
    train_data: Dataset, test: Dataset, config: TrainConfig, seed: int = 0, every: int = 1
) -> tuple[SladModel, LossDistributionRecorder]:
    """Train with a recorder attached; returns the model and the CSV-ready recorder."""
    recorder = LossDistributionRecorder(test, seed=seed, every=every)
    model = train(train_data, config, epoch_callback=recorder)
    return model, recorder


@dataclass
class ExperimentResult:
    report: MetricReport
    model: SladModel
    scores: np.ndarray
    test: Dataset
    recorder: LossDistributionRecorder | None = None


def run_experiment(
    dataset: Dataset,
    config: TrainConfig,
    seed: int,
    contamination: float = 0.0,
    threads: int = 1,
    record_every: int | None = None,
) -> ExperimentResult:
    """Split, optionally contaminate, train and score one labeled dataset.

    ``seed`` drives the split, the contamination and the model
    (``config.seed`` is overridden), so paired runs with the same seed see
    identical data.
    """
    split = split_protocol(dataset, seed)
    data = dataset
    if contamination > 0:
        split, data = contaminate(split, dataset, contamination, seed)
    config = replace(config, seed=seed)
    test = data.subset(split.test)
    recorder = None
    if record_every:
        recorder = LossDistributionRecorder(test, seed=seed, every=record_every)
    model = train(data.subset(split.train), config, epoch_callback=recorder)
    if recorder is not None and recorder.last_epoch == config.epochs:
        # the final-epoch recording already holds every per-sample loss of the test set
        scores = np.array([float(np.sum(s)) for s in recorder.last_samples])
    else:
        scores = score_batch(model, test, seed=seed, threads=threads)
    echo = asdict(config) | {"contamination": contamination}
    report = MetricReport.from_scores(scores, test.labels, seed, echo)
    logger.info("seed %d: AUC-ROC %.4f AUC-PR %.4f", seed, report.auc_roc, report.auc_pr)
    return ExperimentResult(report, model, scores, test, recorder)
