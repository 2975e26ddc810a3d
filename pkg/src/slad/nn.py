"""Minimal dense network engine with hand-written backpropagation.

Everything is float64 numpy. Matrices are plain ``np.ndarray`` objects;
vector-valued operations (softmax, JSD and its gradient) work along the last
axis so they accept either a single vector or a stack of them.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from slad.errors import InvalidInputError, InvalidStateError, TrainingError

logger = logging.getLogger(__name__)

LEAKY_SLOPE = 0.01
LOG_FLOOR = 1e-12
ACTIVATIONS = ("identity", "leaky_relu", "sigmoid")


def softmax(v: np.ndarray) -> np.ndarray:
    """Numerically stable softmax along the last axis."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 0 or v.shape[-1] == 0:
        raise InvalidInputError("softmax needs a non-empty vector")
    z = v - v.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _jsd_parts(p: np.ndarray, y: np.ndarray):
    if p.shape != y.shape:
        raise InvalidInputError(f"length mismatch: {p.shape} vs {y.shape}")
    lp = np.log(np.maximum(p, LOG_FLOOR))
    ly = np.log(np.maximum(y, LOG_FLOOR))
    lm = np.log(np.maximum(0.5 * (p + y), LOG_FLOOR))
    return lp, ly, lm


def jsd(p: np.ndarray, y: np.ndarray) -> np.ndarray | float:
    """Jensen-Shannon divergence (natural log) between two distributions.

    Reduces over the last axis; returns a float for 1-D inputs. The value is
    bounded by ``ln 2``.
    """
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    lp, ly, lm = _jsd_parts(p, y)
    # pairing each term with its mirror keeps jsd(a, b) == jsd(b, a) bitwise
    out = 0.5 * ((p * (lp - lm)) + (y * (ly - lm))).sum(axis=-1)
    out = np.maximum(out, 0.0)
    return float(out) if out.ndim == 0 else out


def jsd_grad_probs(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Partial derivative of the JSD with respect to the first distribution."""
    lp, _, lm = _jsd_parts(p, y)
    return 0.5 * (lp - lm)


def jsd_softmax_grad(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient of ``jsd(softmax(logits), y)`` with respect to ``logits``."""
    logits = np.asarray(logits, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    p = softmax(logits)
    g = jsd_grad_probs(p, y)
    return p * (g - (p * g).sum(axis=-1, keepdims=True))


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "identity":
        return z
    if name == "leaky_relu":
        # valid because the slope is below 1
        return np.maximum(z, LEAKY_SLOPE * z)
    if name == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * z))
    raise InvalidInputError(f"unknown activation {name!r}")


def _backprop_activation(name: str, grad: np.ndarray, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "identity":
        return grad
    if name == "leaky_relu":
        # arithmetic on the mask avoids slow masked writes; the factor is
        # exactly 1.0 or LEAKY_SLOPE
        return grad * (LEAKY_SLOPE + (1.0 - LEAKY_SLOPE) * (z > 0))
    return grad * (a * (1.0 - a))


@dataclass
class DenseLayer:
    """Affine map ``x @ weights.T + bias`` followed by an activation."""

    weights: np.ndarray
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2:
            raise InvalidInputError("weights must be a 2-D matrix")
        if self.bias.shape != (self.weights.shape[0],):
            raise InvalidInputError(
                f"bias length {self.bias.shape} != weights rows {self.weights.shape[0]}"
            )
        if self.activation not in ACTIVATIONS:
            raise InvalidInputError(f"unknown activation {self.activation!r}")

    @property
    def n_in(self) -> int:
        return self.weights.shape[1]

    @property
    def n_out(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def init_uniform(
        cls, n_in: int, n_out: int, activation: str, rng: np.random.Generator
    ) -> DenseLayer:
        """Uniform(-1/sqrt(n_in), 1/sqrt(n_in)) for weights and bias."""
        bound = 1.0 / np.sqrt(n_in)
        w = rng.uniform(-bound, bound, size=(n_out, n_in))
        b = rng.uniform(-bound, bound, size=n_out)
        return cls(w, b, activation)


@dataclass
class ForwardCache:
    """Per-layer inputs and pre-activations recorded by :meth:`MlpNet.forward`."""

    net_id: int
    shapes: tuple
    inputs: list[np.ndarray] = field(default_factory=list)
    preacts: list[np.ndarray] = field(default_factory=list)
    outputs: list[np.ndarray] = field(default_factory=list)


@dataclass
class MlpNet:
    layers: list[DenseLayer]

    def __post_init__(self) -> None:
        if not self.layers:
            raise InvalidInputError("an MLP needs at least one layer")
        for i, (a, b) in enumerate(zip(self.layers, self.layers[1:])):
            if a.n_out != b.n_in:
                raise InvalidInputError(
                    f"layer {i} outputs {a.n_out} but layer {i + 1} expects {b.n_in}"
                )

    @classmethod
    def build(
        cls,
        sizes: Sequence[int],
        hidden_activation: str,
        rng: np.random.Generator,
        out_activation: str = "identity",
    ) -> MlpNet:
        """Build ``len(sizes) - 1`` layers with uniform fan-in initialization."""
        layers = []
        for i, (n_in, n_out) in enumerate(zip(sizes, sizes[1:])):
            act = out_activation if i == len(sizes) - 2 else hidden_activation
            layers.append(DenseLayer.init_uniform(n_in, n_out, act, rng))
        return cls(layers)

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out

    def shapes(self) -> tuple:
        return tuple((l.weights.shape, l.activation) for l in self.layers)

    def parameters(self) -> list[np.ndarray]:
        """Parameter arrays in the fixed order ``W0, b0, W1, b1, ...``."""
        out = []
        for layer in self.layers:
            out.extend((layer.weights, layer.bias))
        return out

    def copy(self) -> MlpNet:
        return MlpNet(
            [DenseLayer(l.weights.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )

    def forward(self, batch: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
        return mlp_forward(self, batch)

    def predict(self, batch: np.ndarray) -> np.ndarray:
        """Forward pass without recording a cache."""
        a = np.asarray(batch, dtype=np.float64)
        if a.ndim != 2 or a.shape[1] != self.n_in:
            raise InvalidInputError(f"expected (n, {self.n_in}) input, got {a.shape}")
        for layer in self.layers:
            z = a @ layer.weights.T
            z += layer.bias
            a = _activate(layer.activation, z)
        return a


def mlp_forward(net: MlpNet, batch: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != net.n_in:
        raise InvalidInputError(f"expected (n, {net.n_in}) input, got {batch.shape}")
    cache = ForwardCache(net_id=id(net), shapes=net.shapes())
    a = batch
    for layer in net.layers:
        z = a @ layer.weights.T
        z += layer.bias
        out = _activate(layer.activation, z)
        cache.inputs.append(a)
        cache.preacts.append(z)
        cache.outputs.append(out)
        a = out
    return a, cache


def mlp_backward(
    net: MlpNet, cache: ForwardCache, output_grad: np.ndarray
) -> list[np.ndarray]:
    """Backpropagate ``output_grad`` (dLoss/dOutput) to parameter gradients.

    Returns gradients in the order of :meth:`MlpNet.parameters`.
    """
    if cache.net_id != id(net) or cache.shapes != net.shapes():
        raise InvalidStateError("forward cache was produced by a different network")
    if len(cache.inputs) != len(net.layers):
        raise InvalidStateError("forward cache is incomplete")
    grad = np.asarray(output_grad, dtype=np.float64)
    if grad.shape != cache.outputs[-1].shape:
        raise InvalidStateError(
            f"output_grad shape {grad.shape} does not match cached output "
            f"{cache.outputs[-1].shape}"
        )
    grads: list[np.ndarray] = [None] * (2 * len(net.layers))  # type: ignore[list-item]
    for i in reversed(range(len(net.layers))):
        layer = net.layers[i]
        dz = _backprop_activation(layer.activation, grad, cache.preacts[i], cache.outputs[i])
        grads[2 * i] = dz.T @ cache.inputs[i]
        grads[2 * i + 1] = dz.sum(axis=0)
        if i:
            grad = dz @ layer.weights
    return grads


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], **kwargs) -> AdamState:
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            **kwargs,
        )


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float = 1e-3,
) -> tuple[Sequence[np.ndarray], AdamState]:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise InvalidInputError("params, grads and optimizer state differ in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != state.m[i].shape:
            raise InvalidInputError(f"shape mismatch at parameter {i}: {p.shape} vs {g.shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise TrainingError(
                f"non-finite gradient at parameter {i} ({bad} bad entries, "
                f"optimizer step {state.step})"
            )
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def finite_diff_check(
    net: MlpNet,
    loss_fn: Callable[[MlpNet], tuple[float, list[np.ndarray]]],
    eps: float = 1e-6,
    max_entries: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
    kink_inputs: np.ndarray | None = None,
) -> float:
    """Compare analytic gradients against central differences.

    Args:
        net: network whose parameters are perturbed in place (and restored).
        loss_fn: returns ``(loss, grads)`` for the current parameters, with
            grads ordered as :meth:`MlpNet.parameters`.
        eps: central-difference step.
        max_entries: if given, check a random subset of this many entries
            per parameter array.
        floor: gradient magnitude below which an entry counts as zero, so
            round-off on exactly-zero gradients is judged in absolute terms.
        kink_inputs: optional batch fed through ``net``; an entry is skipped
            when its +-eps perturbation flips the sign of any LeakyReLU
            pre-activation on this batch, since a central difference across
            a kink measures neither one-sided slope.

    Returns:
        Max over checked entries of ``|a - n| / max(|a|, |n|, floor)``.
    """
    if not 0 < eps <= 1e-2:
        raise InvalidInputError(f"eps must lie in (0, 1e-2], got {eps}")
    _, analytic = loss_fn(net)
    rng = np.random.default_rng(seed)

    def pattern():
        if kink_inputs is None:
            return None
        _, cache = mlp_forward(net, kink_inputs)
        return [
            z > 0 for z, layer in zip(cache.preacts, net.layers) if layer.activation == "leaky_relu"
        ]

    base = pattern()
    worst = 0.0
    skipped = 0
    for p, g in zip(net.parameters(), analytic):
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        gflat = np.asarray(g).reshape(-1)
        for j in idx:
            orig = flat[j]
            flat[j] = orig + eps
            up, _ = loss_fn(net)
            crossed = base is not None and _flipped(base, pattern())
            flat[j] = orig - eps
            down, _ = loss_fn(net)
            crossed = crossed or (base is not None and _flipped(base, pattern()))
            flat[j] = orig
            if crossed:
                skipped += 1
                continue
            num = (up - down) / (2.0 * eps)
            a = gflat[j]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    if skipped:
        logger.debug("finite-difference check skipped %d kink-crossing entries", skipped)
    return float(worst)


def _flipped(base: list[np.ndarray], other: list[np.ndarray]) -> bool:
    return any(not np.array_equal(a, b) for a, b in zip(base, other))
