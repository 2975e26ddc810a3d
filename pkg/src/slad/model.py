"""Scale-learning network, training loop, anomaly scoring and persistence."""

from __future__ import annotations

import base64
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from slad.data import Dataset, FeatureWeights, Standardizer, compute_feature_weights
from slad.errors import (
    AblationInapplicableError,
    InvalidInputError,
    ModelLoadError,
    TrainingError,
)
from slad.nn import (
    AdamState,
    DenseLayer,
    MlpNet,
    adam_step,
    jsd,
    jsd_softmax_grad,
    mlp_backward,
    softmax,
)
from slad.supervision import (
    TRANSFORM_VARIANTS,
    SupervisionSet,
    deep_mlp_transform_bank,  # noqa: F401  (re-exported ablation helper)
    generate_supervision,
    make_transform,
    scoring_samples,
    stream,
    zero_pad_transform,  # noqa: F401
)

logger = logging.getLogger(__name__)

FORMAT_NAME = "slad-model"
FORMAT_VERSION = 1
LOSS_VARIANTS = ("jsd", "mse", "ce")


@dataclass
class TrainConfig:
    c: int = 10
    r: int = 20
    h: int = 128
    gamma: float = 200.0
    delta: int = 50
    hidden_units: int = 100
    lr: float = 1e-3
    batch_size: int = 128
    epochs: int = 50
    seed: int = 0
    loss_variant: str = "jsd"
    transform_variant: str = "affine"
    use_feature_weights: bool = True
    resample_each_epoch: bool = False

    def validate(self) -> TrainConfig:
        problems = []
        if self.c < 2:
            problems.append("c must be >= 2")
        if self.r < 1:
            problems.append("r must be >= 1")
        if self.h < 1:
            problems.append("h must be >= 1")
        if not self.gamma > 0:
            problems.append("gamma must be > 0")
        if self.epochs < 1:
            problems.append("epochs must be >= 1")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.hidden_units < 1:
            problems.append("hidden_units must be >= 1")
        if not self.lr > 0:
            problems.append("lr must be > 0")
        if self.loss_variant not in LOSS_VARIANTS:
            problems.append(f"loss_variant must be one of {LOSS_VARIANTS}")
        if self.transform_variant not in TRANSFORM_VARIANTS:
            problems.append(f"transform_variant must be one of {TRANSFORM_VARIANTS}")
        if problems:
            raise InvalidInputError("invalid TrainConfig: " + "; ".join(problems))
        return self

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class SladModel:
    config: TrainConfig
    feature_weights: FeatureWeights
    transform: object  # TransformBank or ZeroPadTransform
    phi: MlpNet
    standardizer: Standardizer
    history: list[float] = field(default_factory=list)
    format_version: int = FORMAT_VERSION

    @property
    def d(self) -> int:
        return self.standardizer.mean.shape[0]


def build_phi(h: int, hidden: int, rng: np.random.Generator) -> MlpNet:
    """Row-shared scoring head ``h -> hidden -> 1`` with LeakyReLU."""
    return MlpNet.build([h, hidden, 1], "leaky_relu", rng)


def phi_forward(phi: MlpNet, U: np.ndarray) -> np.ndarray:
    """One logit per row of U; U may be (c, h) or a stack (B, c, h)."""
    U = np.asarray(U, dtype=np.float64)
    if U.shape[-1] != phi.n_in:
        raise InvalidInputError(f"U has {U.shape[-1]} columns, network expects {phi.n_in}")
    return phi.predict(U.reshape(-1, U.shape[-1])).reshape(U.shape[:-1])


def scale_loss(p: np.ndarray, y: np.ndarray, variant: str = "jsd") -> tuple:
    """Per-sample loss and its gradient with respect to the logits ``p``.

    Works on a single length-c vector or a (B, c) stack; the loss is
    reduced over the last axis only.
    """
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise InvalidInputError(f"logits {p.shape} and labels {y.shape} differ in shape")
    if variant == "jsd":
        target = softmax(y)
        return jsd(softmax(p), target), jsd_softmax_grad(p, target)
    if variant == "mse":
        diff = p - y
        c = p.shape[-1]
        loss = (diff**2).mean(axis=-1)
        return (float(loss) if loss.ndim == 0 else loss), 2.0 * diff / c
    if variant == "ce":
        onehot = np.zeros_like(y)
        np.put_along_axis(onehot, np.argmax(y, axis=-1)[..., None], 1.0, axis=-1)
        shifted = p - p.max(axis=-1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        loss = -((shifted - log_z) * onehot).sum(axis=-1)
        return (float(loss) if loss.ndim == 0 else loss), softmax(p) - onehot
    raise InvalidInputError(f"unknown loss variant {variant!r}")


def batch_loss_and_grads(
    phi: MlpNet, U: np.ndarray, y: np.ndarray, variant: str
) -> tuple[float, list[np.ndarray]]:
    """Mean loss over a (B, c, h) batch and parameter gradients of that mean."""
    b, c, h = U.shape
    out, cache = phi.forward(U.reshape(b * c, h))
    losses, dlogits = scale_loss(out.reshape(b, c), y, variant)
    grads = mlp_backward(phi, cache, dlogits.reshape(b * c, 1) / b)
    return float(np.mean(losses)), grads


def supervision_loss(phi: MlpNet, sup: SupervisionSet, variant: str, chunk: int = 2048) -> float:
    """Mean per-sample loss over a whole supervision set."""
    total = 0.0
    for start in range(0, len(sup), chunk):
        U = sup.U[start : start + chunk]
        losses, _ = scale_loss(phi_forward(phi, U), sup.y[start : start + chunk], variant)
        total += float(np.sum(losses))
    return total / len(sup)


def _fit_preprocessing(dataset: Dataset, config: TrainConfig):
    stats = Standardizer.fit(dataset.features)
    x = stats.transform(dataset.features)
    if config.use_feature_weights:
        weights = compute_feature_weights(x, config.delta)
    else:
        weights = FeatureWeights.uniform(dataset.d)
    return stats, x, weights


def train(
    dataset: Dataset,
    config: TrainConfig | None = None,
    epoch_callback: Callable[[int, SladModel], None] | None = None,
) -> SladModel:
    """Fit a scale-learning model on (assumed normal) training data.

    Supervision is generated once up front unless
    ``config.resample_each_epoch`` is set. Each optimizer step uses the mean
    loss over ``batch_size`` scale samples. ``epoch_callback(epoch, model)``
    runs after every epoch with a model view sharing the live network.
    """
    config = (config or TrainConfig()).validate()
    if dataset.n == 0:
        raise InvalidInputError("cannot train on an empty dataset")
    if config.transform_variant == "zero_pad" and dataset.d > config.h:
        raise AblationInapplicableError(
            f"zero padding needs D <= h, got D={dataset.d} and h={config.h}"
        )
    seeds = np.random.SeedSequence(config.seed).generate_state(4)
    bank_seed, sup_seed, init_seed, shuffle_seed = (int(s) for s in seeds)

    stats, x, weights = _fit_preprocessing(dataset, config)
    transform = make_transform(config.transform_variant, config.h, bank_seed)
    phi = build_phi(config.h, config.hidden_units, np.random.default_rng(init_seed))
    model = SladModel(config, weights, transform, phi, stats)

    def supervision(epoch: int) -> SupervisionSet:
        seed = sup_seed if epoch == 0 else int(stream(sup_seed, epoch).integers(2**63))
        return generate_supervision(
            x, transform, weights, config.c, config.r, config.h, config.gamma, seed
        )

    sup = supervision(0)
    params = phi.parameters()
    state = AdamState.zeros_like(params)
    order_rng = np.random.default_rng(shuffle_seed)
    logger.info(
        "training on %d instances, %d scale samples, %d epochs", dataset.n, len(sup), config.epochs
    )
    for epoch in range(config.epochs):
        if config.resample_each_epoch and epoch > 0:
            sup = supervision(epoch)
        order = order_rng.permutation(len(sup))
        running = 0.0
        n_batches = 0
        for b, start in enumerate(range(0, len(sup), config.batch_size)):
            idx = order[start : start + config.batch_size]
            loss, grads = batch_loss_and_grads(phi, sup.U[idx], sup.y[idx], config.loss_variant)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch + 1}, batch {b + 1}")
            try:
                adam_step(params, grads, state, config.lr)
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch + 1}, batch {b + 1}: {exc}") from exc
            running += loss
            n_batches += 1
        model.history.append(running / n_batches)
        logger.debug("epoch %d mean loss %.6f", epoch + 1, model.history[-1])
        if epoch_callback is not None:
            epoch_callback(epoch + 1, model)
    return model


def _standardized(model: SladModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != model.d:
        raise InvalidInputError(
            f"instance has {x.shape[-1] if x.ndim else 0} features, model expects D={model.d}"
        )
    return model.standardizer.transform(x)


def sample_losses(model: SladModel, x: np.ndarray, r_eval: int | None = None, seed: int = 0) -> np.ndarray:
    """Loss of each of the ``r_eval`` scale samples generated for ``x``."""
    cfg = model.config
    r = cfg.r if r_eval is None else r_eval
    if r < 1:
        raise InvalidInputError("r_eval must be >= 1")
    z = _standardized(model, x)
    U, y = scoring_samples(z, model.transform, model.feature_weights, cfg.c, r, cfg.h, cfg.gamma, seed)
    losses, _ = scale_loss(phi_forward(model.phi, U), y, cfg.loss_variant)
    return np.atleast_1d(losses)


def score(model: SladModel, x: np.ndarray, r_eval: int | None = None, seed: int = 0) -> float:
    """Anomaly score: summed loss over freshly generated scale samples."""
    return float(np.sum(sample_losses(model, x, r_eval, seed)))


def score_batch(
    model: SladModel,
    data: Dataset | np.ndarray,
    seed: int = 0,
    r_eval: int | None = None,
    threads: int = 1,
) -> np.ndarray:
    """Score every row. Each row draws from its own stream, so any row order
    and any thread count give the same per-row values."""
    x = data.features if isinstance(data, Dataset) else np.asarray(data, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.d:
        raise InvalidInputError(f"data has shape {x.shape}, model expects D={model.d} columns")
    if threads <= 1:
        return np.array([score(model, row, r_eval, seed) for row in x])
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return np.array(list(pool.map(lambda row: score(model, row, r_eval, seed), x)))


# -- persistence -----------------------------------------------------------


def _encode(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(arr.shape), "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def _decode(block: dict) -> np.ndarray:
    raw = base64.b64decode(block["data"], validate=True)
    shape = tuple(int(s) for s in block["shape"])
    arr = np.frombuffer(raw, dtype="<f8")
    if arr.size != int(np.prod(shape)):
        raise ModelLoadError(f"parameter block holds {arr.size} values, shape says {shape}")
    return arr.reshape(shape).astype(np.float64)


def save_model(model: SladModel, path) -> None:
    """Write a self-describing JSON model file.

    Layout: ``format``, ``version``, ``config``, ``standardizer`` (mean, std),
    ``feature_weights`` (mode, weights), ``transform`` (variant, h, seed and
    a digest of the bank entries for every cardinality up to D), ``phi``
    (per layer: activation, weights, bias), ``history``. Arrays are
    base64-encoded little-endian float64 with an explicit shape.
    """
    transform = model.transform
    doc = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "config": asdict(model.config),
        "standardizer": {"mean": _encode(model.standardizer.mean), "std": _encode(model.standardizer.std)},
        "feature_weights": {
            "mode": model.feature_weights.mode,
            "weights": _encode(model.feature_weights.weights),
        },
        "transform": {**transform.state(), "digest": transform.digest(range(1, model.d + 1))},
        "phi": [
            {"activation": l.activation, "weights": _encode(l.weights), "bias": _encode(l.bias)}
            for l in model.phi.layers
        ],
        "history": list(model.history),
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_model(path) -> SladModel:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ModelLoadError(f"{path}: no such file") from None
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ModelLoadError(f"{path}: corrupt or truncated model file ({exc})") from None
    if not isinstance(doc, dict) or doc.get("format") != FORMAT_NAME:
        raise ModelLoadError(f"{path}: not a {FORMAT_NAME} file")
    if doc.get("version") != FORMAT_VERSION:
        raise ModelLoadError(
            f"{path}: unsupported format version {doc.get('version')!r}, expected {FORMAT_VERSION}"
        )
    try:
        config = TrainConfig(**doc["config"]).validate()
        stats = Standardizer(_decode(doc["standardizer"]["mean"]), _decode(doc["standardizer"]["std"]))
        fw = doc["feature_weights"]
        weights = FeatureWeights(_decode(fw["weights"]), fw["mode"])
        tr = doc["transform"]
        transform = make_transform(tr["variant"], int(tr["h"]), int(tr["seed"]))
        phi = MlpNet(
            [
                DenseLayer(_decode(l["weights"]), _decode(l["bias"]), l["activation"])
                for l in doc["phi"]
            ]
        )
        history = [float(v) for v in doc.get("history", [])]
    except ModelLoadError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelLoadError(f"{path}: malformed model file ({exc!r})") from None
    d = stats.mean.shape[0]
    if transform.digest(range(1, d + 1)) != tr.get("digest"):
        raise ModelLoadError(f"{path}: rebuilt transform bank does not match the stored digest")
    if phi.n_in != config.h or weights.weights.shape[0] != d:
        raise ModelLoadError(f"{path}: parameter shapes disagree with the stored config")
    return SladModel(config, weights, transform, phi, stats, history)
