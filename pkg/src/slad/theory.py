"""Numerical checks of the subspace-usefulness probabilities and the
inlier-priority gradient argument.

Notation: ``F`` total features, ``G`` effective features (those carrying an
anomaly's deviation), ``q`` the minimum number of effective features a
subspace must contain to be useful. ``alpha = q / G`` and ``beta = G / F``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.special import gammaln, logsumexp

from slad.errors import InvalidInputError
from slad.nn import softmax
from slad.supervision import stream

MAX_FEATURES = 2000
MAX_CURVE_DIM = 400
MIN_MC_TRIALS = 10_000
MOMENT_TOLERANCE = 0.02


@dataclass(frozen=True)
class SubspaceUsefulnessQuery:
    F: int
    G: int
    q: int

    def __post_init__(self) -> None:
        if not 1 <= self.G <= self.F:
            raise InvalidInputError(f"need 1 <= G <= F, got G={self.G}, F={self.F}")
        if not 1 <= self.q <= self.G:
            raise InvalidInputError(f"need 1 <= q <= G, got q={self.q}, G={self.G}")

    @property
    def alpha(self) -> float:
        return self.q / self.G

    @property
    def beta(self) -> float:
        return self.G / self.F

    @classmethod
    def from_ratios(cls, F: int, alpha: float, beta: float) -> SubspaceUsefulnessQuery:
        """``G = round(beta * F)`` (half up) and ``q = ceil(alpha * G)``."""
        G = int(math.floor(beta * F + 0.5))
        q = int(math.ceil(alpha * G - 1e-9))
        return cls(F, G, max(q, 1))


def pr_subspace_useful(query: SubspaceUsefulnessQuery) -> float:
    """Closed-form probability that a random subspace is useful.

    The subspace size ``j`` is uniform on ``1..F``; each of the ``j`` draws
    is effective with probability ``G/F`` independently. The result is the
    average over ``j`` of ``P(Binomial(j, G/F) >= q)``, with binomial terms
    evaluated in log space.
    """
    F, G, q = query.F, query.G, query.q
    if F > MAX_FEATURES:
        raise InvalidInputError(f"F={F} exceeds the supported maximum {MAX_FEATURES}")
    if G == F:
        # every draw is effective, so exactly the sizes j >= q succeed
        return (F - q + 1) / F
    log_p = math.log(G / F)
    log_1mp = math.log1p(-G / F)
    j = np.arange(q, F + 1, dtype=np.float64)[:, None]
    k = np.arange(q, F + 1, dtype=np.float64)[None, :]
    with np.errstate(invalid="ignore"):
        logs = gammaln(j + 1) - gammaln(k + 1) - gammaln(j - k + 1) + k * log_p + (j - k) * log_1mp
    # terms with k > j do not exist
    logs = np.where(k <= j, logs, -np.inf)
    tails = np.minimum(1.0, np.exp(logsumexp(logs, axis=1)))
    return min(1.0, max(0.0, math.fsum(tails) / F))


@dataclass(frozen=True)
class MCEstimate:
    mean: float
    stderr: float
    trials: int


def pr_subspace_useful_mc(
    query: SubspaceUsefulnessQuery,
    trials: int,
    rng: np.random.Generator,
    regime: str = "with_replacement",
) -> MCEstimate:
    """Monte-Carlo estimate of the usefulness probability.

    ``with_replacement`` draws each of the ``j`` features independently
    (binomial count of effective ones); ``without_replacement`` draws ``j``
    distinct features, as the subspace sampler does (hypergeometric count).
    """
    if trials < MIN_MC_TRIALS:
        raise InvalidInputError(f"use at least {MIN_MC_TRIALS} trials, got {trials}")
    F, G, q = query.F, query.G, query.q
    j = rng.integers(1, F + 1, size=trials)
    if regime == "with_replacement":
        k = rng.binomial(j, G / F)
    elif regime == "without_replacement":
        k = rng.hypergeometric(G, F - G, j)
    else:
        raise InvalidInputError(f"unknown sampling regime {regime!r}")
    hits = k >= q
    mean = float(hits.mean())
    return MCEstimate(mean, math.sqrt(mean * (1.0 - mean) / trials), trials)


def theorem2_bound(alpha: float) -> float:
    """Infimum over F of the usefulness probability: ``1 - alpha``."""
    if not 0.0 < alpha <= 1.0:
        raise InvalidInputError(f"alpha must lie in (0, 1], got {alpha}")
    return 1.0 - alpha


def pr_U_useful(c: int, alpha: float) -> float:
    """Probability that at least one of ``c`` subspaces is useful when each
    is useful with probability ``1 - alpha``."""
    if c < 1:
        raise InvalidInputError("c must be >= 1")
    if not 0.0 < alpha <= 1.0:
        raise InvalidInputError(f"alpha must lie in (0, 1], got {alpha}")
    summed = math.fsum(
        math.comb(c, k) * (1.0 - alpha) ** k * alpha ** (c - k) for k in range(1, c + 1)
    )
    closed = 1.0 - alpha**c
    if abs(summed - closed) > 1e-12:
        raise ArithmeticError(f"sum form {summed!r} disagrees with 1 - alpha^c = {closed!r}")
    return summed


@dataclass(frozen=True)
class CurvePoint:
    F: int
    G: int
    q: int
    alpha: float
    beta: float
    alpha_eff: float
    pr: float
    exact: bool  # beta*F and alpha*G are both integers


def prob_curve(alpha: float, beta: float, f_max: int = MAX_CURVE_DIM) -> list[CurvePoint]:
    """Usefulness probability for every ``F`` from the first with ``G >= 1``
    up to ``f_max``, with ``G`` and ``q`` integerized per ``from_ratios``."""
    if not (0.0 < alpha <= 1.0 and 0.0 < beta <= 1.0):
        raise InvalidInputError("alpha and beta must lie in (0, 1]")
    if not 1 <= f_max <= MAX_CURVE_DIM:
        raise InvalidInputError(f"f_max must lie in [1, {MAX_CURVE_DIM}], got {f_max}")
    out = []
    for F in range(1, f_max + 1):
        if math.floor(beta * F + 0.5) < 1:
            continue
        query = SubspaceUsefulnessQuery.from_ratios(F, alpha, beta)
        exact = abs(beta * F - query.G) < 1e-9 and abs(alpha * query.G - query.q) < 1e-9
        out.append(
            CurvePoint(F, query.G, query.q, alpha, beta, query.alpha, pr_subspace_useful(query), exact)
        )
    return out


# -- inlier priority ---------------------------------------------------------


@dataclass(frozen=True)
class InlierPriorityConfig:
    u: int = 32
    c: int = 10
    n_inlier: int = 100
    n_anom: int = 10
    trials: int = 1000
    seed: int = 0
    input_dim: int = 4

    def __post_init__(self) -> None:
        if min(self.u, self.c, self.n_inlier, self.n_anom, self.trials, self.input_dim) < 1:
            raise InvalidInputError("all counts must be >= 1")
        if self.n_inlier < self.n_anom:
            raise InvalidInputError("n_inlier must be >= n_anom")


@dataclass
class InlierPriorityResult:
    ratio: float
    stderr: float
    inlier_mean: float
    anom_mean: float
    moments: dict = field(default_factory=dict)


def _group_grad_sq_norm(h: np.ndarray, w: np.ndarray, c: int) -> float:
    """``||sum_i d l_k^(i) / d w_k||^2`` averaged over output positions k.

    ``h`` is (N, u) penultimate activations, ``w`` the (u, c) final weights;
    targets are uniform.
    """
    p = softmax(h @ w)
    y = 1.0 / c
    # d l_k / d p_k (through the softmax diagonal) for each sample and k
    coef = 0.5 * (math.log(2.0) + np.log(p) - np.log(y + p)) * p * (1.0 - p)
    summed = h.T @ coef  # (u, c)
    return float((summed**2).sum(axis=0).mean())


def _penultimate(x: np.ndarray, v: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * (x @ v.T)))


def inlier_priority_experiment(cfg: InlierPriorityConfig) -> InlierPriorityResult:
    """Ratio of expected squared gradient norms, inlier group over anomaly group.

    Each trial draws one network: a random sigmoid layer (weights uniform on
    [-1, 1], divided by sqrt(input_dim)) over standard-normal inputs produces the ``u`` penultimate
    activations, and the final ``u x c`` weights are uniform on [-1, 1].
    Both groups go through the same network; only their sizes differ.

    Raises:
        ArithmeticError: if the sampled activations do not reproduce the
            moment values the analysis relies on (1/4, 1/16, 1/16) to within
            0.02.
    """
    inl = np.empty(cfg.trials)
    anom = np.empty(cfg.trials)
    m11, m22, m31 = [], [], []
    for t in range(cfg.trials):
        rng = stream(cfg.seed, t)
        # 1/sqrt(fan-in) keeps the pre-activation variance at 1/3 for any input width
        v = rng.uniform(-1.0, 1.0, size=(cfg.u, cfg.input_dim)) / math.sqrt(cfg.input_dim)
        w = rng.uniform(-1.0, 1.0, size=(cfg.u, cfg.c))
        h_in = _penultimate(rng.standard_normal((cfg.n_inlier, cfg.input_dim)), v)
        h_an = _penultimate(rng.standard_normal((cfg.n_anom, cfg.input_dim)), v)
        inl[t] = _group_grad_sq_norm(h_in, w, cfg.c)
        anom[t] = _group_grad_sq_norm(h_an, w, cfg.c)
        if cfg.n_inlier >= 2:
            a, b = h_in[0], h_in[1]
            m11.append(np.mean(a * b))
            m22.append(np.mean(a**2 * b**2))
            m31.append(np.mean(a**3 * b))
    moments = {}
    if m11:
        moments = {
            "E[h_i h_j]": float(np.mean(m11)),
            "E[h_i^2 h_j^2]": float(np.mean(m22)),
            "E[h_i^3 h_j]": float(np.mean(m31)),
        }
        for name, target in zip(moments, (0.25, 1 / 16, 1 / 16)):
            if abs(moments[name] - target) > MOMENT_TOLERANCE:
                raise ArithmeticError(
                    f"{name} = {moments[name]:.4f}, expected {target:.4f} +- {MOMENT_TOLERANCE}"
                )
    mi, ma = float(inl.mean()), float(anom.mean())
    ratio = mi / ma
    # delta method for a ratio of paired means
    resid = inl - ratio * anom
    stderr = float(np.std(resid, ddof=1) / math.sqrt(cfg.trials) / ma) if cfg.trials > 1 else math.nan
    return InlierPriorityResult(ratio, stderr, mi, ma, moments)


@dataclass
class SlopeFit:
    slope: float
    stderr: float
    ci_low: float
    ci_high: float
    population_ratios: list[float]
    gradient_ratios: list[float]


def inlier_priority_sweep(
    population_ratios=(1, 2, 5, 10),
    n_anom: int = 10,
    u: int = 32,
    c: int = 10,
    trials: int = 1000,
    seed: int = 0,
) -> tuple[list[InlierPriorityResult], SlopeFit]:
    """Run the experiment across inlier/anomaly population ratios and fit the
    log-log slope of gradient ratio against population ratio (95% CI)."""
    results = []
    for k, pr in enumerate(population_ratios):
        cfg = InlierPriorityConfig(u=u, c=c, n_inlier=int(pr * n_anom), n_anom=n_anom, trials=trials, seed=seed)
        results.append(inlier_priority_experiment(cfg))
    xs = np.log(np.asarray(population_ratios, dtype=np.float64))
    ys = np.log([r.ratio for r in results])
    n = xs.size
    xc = xs - xs.mean()
    slope = float((xc * (ys - ys.mean())).sum() / (xc**2).sum())
    intercept = ys.mean() - slope * xs.mean()
    if n > 2:
        resid = ys - (intercept + slope * xs)
        se = float(math.sqrt((resid**2).sum() / (n - 2) / (xc**2).sum()))
        tcrit = float(stats.t.ppf(0.975, n - 2))
    else:
        se, tcrit = 0.0, 0.0
    fit = SlopeFit(
        slope,
        se,
        slope - tcrit * se,
        slope + tcrit * se,
        [float(v) for v in population_ratios],
        [r.ratio for r in results],
    )
    return results, fit
