"""Scale learning for tabular anomaly detection.

Train a scale-learning model on (mostly) normal rows, then rank new rows by
how badly the model aligns the scale distribution of their random
subspaces::

    from slad import TrainConfig, make_synthetic, train, score_batch

    data = make_synthetic(seed=0)
    model = train(data.subset(data.labels == 0), TrainConfig(epochs=5))
    scores = score_batch(model, data)
"""

from slad.data import Dataset, load_csv, make_synthetic, save_csv, split_protocol
from slad.evaluation import MetricReport, auc_pr, auc_roc, run_experiment
from slad.model import SladModel, TrainConfig, load_model, save_model, score, score_batch, train

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "MetricReport",
    "SladModel",
    "TrainConfig",
    "auc_pr",
    "auc_roc",
    "load_csv",
    "load_model",
    "make_synthetic",
    "run_experiment",
    "save_csv",
    "save_model",
    "score",
    "score_batch",
    "split_protocol",
    "train",
]
