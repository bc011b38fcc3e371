"""Differentially private selection and noise primitives.

Every function takes its randomness explicitly (``RngStream`` or a numpy
``Generator``).  Neighbouring datasets differ by one added or removed record,
so a vote histogram has per-count sensitivity 1.  Ties are always broken
towards the lowest candidate index.

Selection functions accept ``size=`` to draw many independent outcomes in one
vectorised call; without it they return a single index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from privadapt.rng import RngLike, as_generator


class InvalidInputError(ValueError):
    """Raised when a mechanism receives arguments outside its contract."""


@dataclass(frozen=True)
class CandidateDomain:
    size: int
    labels: Optional[tuple[str, ...]] = None

    def __post_init__(self) -> None:
        if self.size < 1:
            raise InvalidInputError("candidate domain must be non-empty")
        if self.labels is not None:
            object.__setattr__(self, "labels", tuple(self.labels))
            if len(self.labels) != self.size:
                raise InvalidInputError("labels must have one entry per candidate")
            if len(set(self.labels)) != self.size:
                raise InvalidInputError("labels must be unique")

    def index(self, label: str) -> int:
        if self.labels is None:
            raise InvalidInputError("domain has no labels")
        return self.labels.index(label)


@dataclass(frozen=True)
class VoteHistogram:
    domain: CandidateDomain
    counts: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        counts = np.asarray(self.counts)
        if counts.ndim != 1 or counts.shape[0] != self.domain.size:
            raise InvalidInputError("counts must have one entry per candidate")
        if not np.all(np.isfinite(counts)) or np.any(counts < 0):
            raise InvalidInputError("counts must be finite and nonnegative")
        if np.any(counts != np.round(counts)):
            raise InvalidInputError("counts must be integers")
        counts = counts.astype(np.int64)
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @classmethod
    def from_counts(cls, counts: Sequence[int], labels: Optional[Sequence[str]] = None) -> "VoteHistogram":
        return cls(CandidateDomain(len(counts), None if labels is None else tuple(labels)), np.asarray(counts))

    @classmethod
    def from_votes(cls, votes: Sequence[int], domain: CandidateDomain) -> "VoteHistogram":
        votes = np.asarray(votes, dtype=np.int64)
        if votes.size and (votes.min() < 0 or votes.max() >= domain.size):
            raise InvalidInputError("vote outside candidate domain")
        return cls(domain, np.bincount(votes, minlength=domain.size))


@dataclass(frozen=True)
class ScoreVector:
    domain: CandidateDomain
    scores: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        scores = np.asarray(self.scores, dtype=float)
        if scores.ndim != 1 or scores.shape[0] != self.domain.size:
            raise InvalidInputError("scores must have one entry per candidate")
        if not np.all(np.isfinite(scores)):
            raise InvalidInputError("scores must be finite")
        scores.setflags(write=False)
        object.__setattr__(self, "scores", scores)

    @classmethod
    def from_scores(cls, scores: Sequence[float]) -> "ScoreVector":
        return cls(CandidateDomain(len(scores)), np.asarray(scores, dtype=float))


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta: float = 0.0

    def __post_init__(self) -> None:
        if not (self.epsilon > 0):
            raise InvalidInputError(f"epsilon must be positive, got {self.epsilon}")
        if not (0.0 <= self.delta < 1.0):
            raise InvalidInputError(f"delta must lie in [0, 1), got {self.delta}")


HistLike = Union[VoteHistogram, Sequence[int], np.ndarray]
ScoresLike = Union[ScoreVector, Sequence[float], np.ndarray]


def as_counts(hist: HistLike) -> np.ndarray:
    if isinstance(hist, VoteHistogram):
        return hist.counts
    arr = np.asarray(hist)
    if arr.size == 0:
        raise InvalidInputError("candidate domain is empty")
    return VoteHistogram.from_counts(arr.ravel()).counts


def as_scores(scores: ScoresLike) -> np.ndarray:
    if isinstance(scores, ScoreVector):
        return scores.scores
    arr = np.asarray(scores, dtype=float)
    if arr.size == 0:
        raise InvalidInputError("candidate domain is empty")
    return ScoreVector.from_scores(arr.ravel()).scores


def _check_sensitivity(sensitivity: float) -> float:
    if not (sensitivity > 0 and math.isfinite(sensitivity)):
        raise InvalidInputError(f"sensitivity must be positive and finite, got {sensitivity}")
    return float(sensitivity)


def _check_epsilon(epsilon: float) -> float:
    # math.inf is accepted and means "noiseless limit"
    if not epsilon > 0:
        raise InvalidInputError(f"epsilon must be positive, got {epsilon}")
    return float(epsilon)


def gaussian_noise(values: Sequence[float], sigma: float, rng: RngLike) -> np.ndarray:
    """Add i.i.d. N(0, sigma^2) noise to every entry; sigma=0 is the identity."""
    values = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(values)):
        raise InvalidInputError("values must be finite")
    if not (sigma >= 0 and math.isfinite(sigma)):
        raise InvalidInputError("sigma must be finite and nonnegative")
    if sigma == 0:
        return values.copy()
    return values + as_generator(rng).normal(0.0, sigma, size=values.shape)


def _noisy_argmax(values: np.ndarray, noise: np.ndarray) -> np.ndarray:
    return np.argmax(values + noise, axis=-1)


def report_noisy_max(
    hist: HistLike,
    epsilon: Optional[float],
    rng: RngLike,
    *,
    noise: str = "laplace",
    scale: Optional[float] = None,
    size: Optional[int] = None,
):
    """Argmax of counts perturbed by independent Laplace or Gaussian noise.

    For ``noise="laplace"`` the scale defaults to ``1/epsilon``, which is
    epsilon-DP for sensitivity-1 counts.  For ``noise="gaussian"`` ``scale`` is
    the standard deviation and must be given.
    """
    counts = as_counts(hist).astype(float)
    if noise == "laplace":
        if scale is None:
            if epsilon is None:
                raise InvalidInputError("laplace noise needs epsilon or scale")
            scale = 1.0 / _check_epsilon(epsilon)
    elif noise == "gaussian":
        if scale is None:
            raise InvalidInputError("gaussian noise needs an explicit scale (sigma)")
    else:
        raise InvalidInputError(f"unknown noise kind {noise!r}")
    if not (scale >= 0 and math.isfinite(scale)):
        raise InvalidInputError(f"noise scale must be finite and nonnegative, got {scale}")
    if counts.size == 1:
        return 0 if size is None else np.zeros(size, dtype=np.int64)
    gen = as_generator(rng)
    shape = counts.shape if size is None else (size, counts.size)
    if noise == "laplace":
        draws = gen.laplace(0.0, 1.0, size=shape) * scale
    else:
        draws = gen.standard_normal(size=shape) * scale
    out = _noisy_argmax(counts, draws)
    return int(out) if size is None else out


def gnmax(hist: HistLike, sigma: float, rng: RngLike, *, size: Optional[int] = None):
    """Gaussian noisy argmax over a teacher vote histogram (PATE release)."""
    if not (sigma > 0 and math.isfinite(sigma)):
        raise InvalidInputError(f"sigma must be positive, got {sigma}")
    return report_noisy_max(hist, None, rng, noise="gaussian", scale=sigma, size=size)


def em_probabilities(scores: ScoresLike, sensitivity: float, epsilon: float) -> np.ndarray:
    """Exact output distribution of the exponential mechanism."""
    q = as_scores(scores)
    sensitivity = _check_sensitivity(sensitivity)
    epsilon = _check_epsilon(epsilon)
    if math.isinf(epsilon):
        p = np.zeros_like(q)
        p[int(np.argmax(q))] = 1.0
        return p
    logits = epsilon * q / (2.0 * sensitivity)
    logits = logits - logits.max()
    w = np.exp(logits)
    return w / w.sum()


def exponential_mechanism(
    scores: ScoresLike,
    sensitivity: float,
    epsilon: float,
    rng: RngLike,
    *,
    size: Optional[int] = None,
):
    """Sample index r with probability proportional to exp(eps * q_r / (2 * sensitivity))."""
    p = em_probabilities(scores, sensitivity, epsilon)
    gen = as_generator(rng)
    if p.size == 1:
        return 0 if size is None else np.zeros(size, dtype=np.int64)
    # inverse-CDF sampling; kept independent of the Gumbel route on purpose
    cdf = np.cumsum(p)
    cdf[-1] = 1.0
    u = gen.random(size=size)
    out = np.searchsorted(cdf, u, side="right")
    return int(out) if size is None else out.astype(np.int64)


def _open_uniform(gen: np.random.Generator, shape) -> np.ndarray:
    # maps [0, 1) strictly inside (0, 1)
    return gen.random(size=shape) * (1.0 - 2.0**-53) + 2.0**-54


def gumbel_noise(gen: np.random.Generator, shape) -> np.ndarray:
    return -np.log(-np.log(_open_uniform(gen, shape)))


def gumbel_topk(
    scores: ScoresLike,
    sensitivity: float,
    epsilon: float,
    k: int,
    rng: RngLike,
    *,
    size: Optional[int] = None,
):
    """Top-k of scores plus Gumbel(2*sensitivity/epsilon) noise, in descending order.

    Equivalent in distribution to k rounds of exponential-mechanism peeling at
    ``epsilon`` per round.
    """
    q = as_scores(scores)
    sensitivity = _check_sensitivity(sensitivity)
    epsilon = _check_epsilon(epsilon)
    if not 1 <= k <= q.size:
        raise InvalidInputError(f"k must be in [1, {q.size}], got {k}")
    scale = 0.0 if math.isinf(epsilon) else 2.0 * sensitivity / epsilon
    shape = q.shape if size is None else (size, q.size)
    noisy = q + scale * gumbel_noise(as_generator(rng), shape)
    order = np.argsort(-noisy, axis=-1, kind="stable")[..., :k]
    return [int(i) for i in order] if size is None else order


def _stable_order(counts: np.ndarray) -> np.ndarray:
    return np.argsort(-counts, kind="stable")


def ptr_topk(hist: HistLike, k: int, budget: PrivacyBudget, rng: RngLike) -> Optional[list[int]]:
    """Propose-test-release for the exact top-k.

    Releases the exact top-k indices iff
    ``gap + Lap(2/eps) - 2*ln(1/(2*delta))/eps > 2`` where ``gap`` is the
    difference between the k-th and (k+1)-th largest counts.  Returns None
    (abstain) otherwise.
    """
    counts = as_counts(hist)
    if budget.delta <= 0:
        raise InvalidInputError("propose-test-release needs delta > 0")
    if not 1 <= k < counts.size:
        raise InvalidInputError(f"k must be in [1, {counts.size - 1}], got {k}")
    order = _stable_order(counts)
    gap = float(counts[order[k - 1]] - counts[order[k]])
    eps = budget.epsilon
    if math.isinf(eps):
        noisy_gap = gap
    else:
        noisy_gap = gap + as_generator(rng).laplace(0.0, 2.0 / eps) - 2.0 * math.log(1.0 / (2.0 * budget.delta)) / eps
    if noisy_gap > 2.0:
        return [int(i) for i in order[:k]]
    return None


def limited_domain_max(hist: HistLike, kbar: int, budget: PrivacyBudget, rng: RngLike) -> Optional[int]:
    """Noisy max restricted to the ``kbar`` largest counts, with a bottom outcome.

    Each restricted count and the threshold
    ``count_(kbar+1) + 1 + 2*ln(1/delta)/eps`` get Laplace(2/eps) noise.  The
    (kbar+1)-th count is taken as 0 when the domain has only ``kbar`` entries.
    Returns None (bottom) when the winner does not clear the noisy threshold.
    """
    counts = as_counts(hist).astype(float)
    if budget.delta <= 0:
        raise InvalidInputError("limited-domain max needs delta > 0")
    if not 1 <= kbar <= counts.size:
        raise InvalidInputError(f"kbar must be in [1, {counts.size}], got {kbar}")
    order = _stable_order(counts)
    top = order[:kbar]
    runner_up = counts[order[kbar]] if kbar < counts.size else 0.0
    eps = budget.epsilon
    if math.isinf(eps):
        noisy = counts[top]
        threshold = runner_up + 1.0
    else:
        gen = as_generator(rng)
        b = 2.0 / eps
        noisy = counts[top] + gen.laplace(0.0, b, size=kbar)
        threshold = runner_up + 1.0 + 2.0 * math.log(1.0 / budget.delta) / eps + gen.laplace(0.0, b)
    best = int(np.argmax(noisy))
    if noisy[best] > threshold:
        return int(top[best])
    return None
