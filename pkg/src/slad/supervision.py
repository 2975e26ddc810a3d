"""Scale-labeled training signals built from random feature subspaces.

Each training unit pairs a ``c x h`` matrix (one row per randomly drawn
subspace, embedded into ``h`` dimensions by a frozen random map) with the
``c`` scale labels of those subspaces.

Randomness is organised in independent streams so results never depend on
the order in which instances are processed: training samples use one stream
per (repeat, instance) pair, scoring uses one stream per instance keyed by the
instance's own values.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from slad.data import FeatureWeights
from slad.errors import AblationInapplicableError, InvalidInputError, InvalidStateError
from slad.nn import LEAKY_SLOPE

TRANSFORM_VARIANTS = ("affine", "zero_pad", "deep_mlp")

# domain-separation tags for derived RNG streams
_TAG_BANK = 0x42414E4B
_TAG_TRAIN = 0x5452414E
_TAG_SCORE = 0x53434F52


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for ``(seed, key...)``."""
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=key))


def instance_key(x: np.ndarray) -> tuple[int, int]:
    """Two 64-bit words hashed from the raw bytes of ``x``."""
    digest = hashlib.blake2b(np.ascontiguousarray(x, dtype="<f8").tobytes(), digest_size=16)
    raw = digest.digest()
    return int.from_bytes(raw[:8], "little"), int.from_bytes(raw[8:], "little")


@dataclass(frozen=True)
class SubspaceSpec:
    indices: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.indices:
            raise InvalidInputError("a subspace needs at least one feature")
        if list(self.indices) != sorted(set(self.indices)):
            raise InvalidInputError("subspace indices must be sorted and distinct")

    @property
    def cardinality(self) -> int:
        return len(self.indices)

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> SubspaceSpec:
        return cls(tuple(int(i) for i in np.flatnonzero(mask)))

    def mask(self, d: int) -> np.ndarray:
        if self.indices[-1] >= d:
            raise InvalidInputError(f"subspace index {self.indices[-1]} out of range for D={d}")
        m = np.zeros(d, dtype=bool)
        m[list(self.indices)] = True
        return m


def draw_subspace_masks(d: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``count`` subspaces of a ``d``-dim space as a boolean mask matrix.

    The cardinality of each is uniform on ``1..d``; the members are a
    uniformly random subset of that size.
    """
    if d < 1:
        raise InvalidInputError("need at least one feature")
    nu = rng.integers(1, d + 1, size=count)
    keys = rng.random((count, d))
    ranks = np.argsort(np.argsort(keys, axis=1), axis=1)
    return ranks < nu[:, None]


def sample_subspace(d: int, rng: np.random.Generator) -> SubspaceSpec:
    return SubspaceSpec.from_mask(draw_subspace_masks(d, 1, rng)[0])


class TransformBank:
    """Frozen random maps from a subspace of cardinality nu into ``h`` dims.

    ``affine`` uses one ``W_nu x + b_nu`` map per cardinality; ``deep_mlp``
    uses a two-layer ``nu -> h -> h`` map with a LeakyReLU in between. All
    entries are created lazily from ``(seed, nu)`` with uniform
    ``+-1/sqrt(fan_in)`` initialization, so the same seed always rebuilds the
    same bank bit for bit.
    """

    def __init__(self, h: int, seed: int, variant: str = "affine") -> None:
        if h < 1:
            raise InvalidInputError("representation dim h must be >= 1")
        if variant not in ("affine", "deep_mlp"):
            raise InvalidInputError(f"unknown bank variant {variant!r}")
        self.h = h
        self.seed = int(seed)
        self.variant = variant
        self._entries: dict[int, tuple[np.ndarray, ...]] = {}

    def entry(self, nu: int) -> tuple[np.ndarray, ...]:
        if nu < 1:
            raise InvalidInputError("cardinality must be >= 1")
        if nu not in self._entries:
            rng = stream(self.seed, _TAG_BANK, nu)
            params = []
            fan_ins = (nu,) if self.variant == "affine" else (nu, self.h)
            for fan_in in fan_ins:
                bound = 1.0 / np.sqrt(fan_in)
                w = rng.uniform(-bound, bound, size=(self.h, fan_in))
                b = rng.uniform(-bound, bound, size=self.h)
                w.setflags(write=False)
                b.setflags(write=False)
                params += [w, b]
            self._entries[nu] = tuple(params)
        return self._entries[nu]

    def apply(self, nu: int, sub: np.ndarray) -> np.ndarray:
        """Embed rows of ``sub`` (n x nu) into ``h`` dims."""
        params = self.entry(nu)
        if sub.shape[-1] != nu:
            raise InvalidStateError(f"sub-vector has {sub.shape[-1]} values, bank entry expects {nu}")
        out = sub @ params[0].T + params[1]
        if self.variant == "deep_mlp":
            out = np.where(out > 0, out, LEAKY_SLOPE * out)
            out = out @ params[2].T + params[3]
        return out

    def digest(self, nus=None) -> str:
        """SHA-256 over the listed (default: instantiated) entries."""
        nus = sorted(self._entries) if nus is None else sorted(nus)
        h = hashlib.sha256()
        for nu in nus:
            h.update(nu.to_bytes(8, "little"))
            for arr in self.entry(nu):
                h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    def state(self) -> dict:
        return {"variant": self.variant, "h": self.h, "seed": self.seed}


class ZeroPadTransform:
    """Copy the sub-vector into the first nu slots of an h-vector."""

    variant = "zero_pad"

    def __init__(self, h: int) -> None:
        self.h = h
        self.seed = 0

    def apply(self, nu: int, sub: np.ndarray) -> np.ndarray:
        if nu > self.h:
            raise AblationInapplicableError(
                f"zero padding cannot embed a {nu}-dim sub-vector into h={self.h}"
            )
        out = np.zeros((sub.shape[0], self.h))
        out[:, :nu] = sub
        return out

    def digest(self, nus=None) -> str:
        return hashlib.sha256(f"zero_pad:{self.h}".encode()).hexdigest()

    def state(self) -> dict:
        return {"variant": self.variant, "h": self.h, "seed": 0}


def make_transform(variant: str, h: int, seed: int):
    if variant == "zero_pad":
        return ZeroPadTransform(h)
    if variant in ("affine", "deep_mlp"):
        return TransformBank(h, seed, variant)
    raise InvalidInputError(f"unknown transform variant {variant!r}")


def zero_pad_transform(x: np.ndarray, s: SubspaceSpec, h: int) -> np.ndarray:
    sub = np.asarray(x, dtype=np.float64)[list(s.indices)]
    return ZeroPadTransform(h).apply(s.cardinality, sub[None, :])[0]


def deep_mlp_transform_bank(d: int, h: int, seed: int) -> TransformBank:
    """Frozen two-layer bank with entries for every cardinality up to ``d``."""
    bank = TransformBank(h, seed, "deep_mlp")
    for nu in range(1, d + 1):
        bank.entry(nu)
    return bank


def embed(rows: np.ndarray, masks: np.ndarray, bank) -> np.ndarray:
    """Transform ``rows[i]`` restricted to ``masks[i]`` for every i.

    Rows sharing a cardinality are pushed through the bank together.
    """
    nu = masks.sum(axis=1)
    out = np.empty((rows.shape[0], bank.h))
    for v in np.unique(nu):
        sel = nu == v
        sub = rows[sel][masks[sel]].reshape(-1, int(v))
        out[sel] = bank.apply(int(v), sub)
    return out


def transform(bank, x: np.ndarray, s: SubspaceSpec) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return bank.apply(s.cardinality, x[list(s.indices)][None, :])[0]


def scale_labels(masks: np.ndarray, weights: np.ndarray, h: int, gamma: float) -> np.ndarray:
    """Scale label of each mask row: ``gamma * sum(weights in subspace) / h``."""
    return gamma * (masks @ weights) / h


def scale_label(s: SubspaceSpec, omega: FeatureWeights, h: int, gamma: float) -> float:
    if gamma <= 0 or h < 1:
        raise InvalidInputError("gamma must be > 0 and h >= 1")
    return float(gamma * np.sum(omega.weights[list(s.indices)]) / h)


@dataclass
class ScaleSample:
    U: np.ndarray
    y: np.ndarray
    subspaces: list[SubspaceSpec] = field(default_factory=list)


def make_scale_sample(
    x: np.ndarray,
    bank,
    omega: FeatureWeights,
    c: int,
    h: int,
    gamma: float,
    rng: np.random.Generator,
) -> ScaleSample:
    if c < 2:
        raise InvalidInputError("a scale sample needs c >= 2 subspaces")
    x = np.asarray(x, dtype=np.float64)
    masks = draw_subspace_masks(x.shape[0], c, rng)
    U = embed(np.broadcast_to(x, masks.shape), masks, bank)
    y = scale_labels(masks, omega.weights, h, gamma)
    return ScaleSample(U, y, [SubspaceSpec.from_mask(m) for m in masks])


@dataclass
class SupervisionSet:
    """``len(instance)`` scale samples stored as stacked arrays.

    Attributes:
        U: (S, c, h) transformed sub-vectors.
        y: (S, c) scale labels.
        instance: (S,) row index of the instance each sample came from.
        masks: (S, c, D) subspace membership.
    """

    U: np.ndarray
    y: np.ndarray
    instance: np.ndarray
    masks: np.ndarray

    def __len__(self) -> int:
        return self.U.shape[0]

    def __getitem__(self, i: int) -> ScaleSample:
        return ScaleSample(
            self.U[i], self.y[i], [SubspaceSpec.from_mask(m) for m in self.masks[i]]
        )


def generate_supervision(
    features: np.ndarray,
    bank,
    omega: FeatureWeights,
    c: int,
    r: int,
    h: int,
    gamma: float,
    seed: int,
) -> SupervisionSet:
    """``r`` scale samples per instance, repeat-major like the training loop.

    Sample ``j * N + i`` is repeat ``j`` of instance ``i`` and draws its
    subspaces from the stream keyed by ``(seed, j, i)``.
    """
    x = np.asarray(features, dtype=np.float64)
    n, d = x.shape
    if n == 0:
        raise InvalidInputError("cannot generate supervision from an empty dataset")
    if c < 2 or r < 1:
        raise InvalidInputError("need c >= 2 and r >= 1")
    masks = np.empty((r * n, c, d), dtype=bool)
    for j in range(r):
        for i in range(n):
            masks[j * n + i] = draw_subspace_masks(d, c, stream(seed, _TAG_TRAIN, j, i))
    instance = np.tile(np.arange(n), r)
    flat_masks = masks.reshape(-1, d)
    rows = np.repeat(x[instance], c, axis=0)
    U = embed(rows, flat_masks, bank).reshape(r * n, c, h)
    y = scale_labels(flat_masks, omega.weights, h, gamma).reshape(r * n, c)
    return SupervisionSet(U, y, instance, masks)


def scoring_samples(
    x: np.ndarray, bank, omega: FeatureWeights, c: int, r: int, h: int, gamma: float, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """``(U, y)`` of shapes (r, c, h) and (r, c) for one already-standardized instance."""
    rng = stream(seed, _TAG_SCORE, *instance_key(x))
    masks = draw_subspace_masks(x.shape[0], r * c, rng)
    U = embed(np.broadcast_to(x, masks.shape), masks, bank).reshape(r, c, h)
    y = scale_labels(masks, omega.weights, h, gamma).reshape(r, c)
    return U, y
