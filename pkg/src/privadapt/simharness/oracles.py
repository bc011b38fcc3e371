"""Exact output distributions of the selection mechanisms on small domains.

* exponential mechanism / Gumbel top-1: direct softmax (log space).
* report-noisy-max with Laplace noise: P(i wins) = int f_i(x) prod_{j != i} F_j(x) dx.
  Between consecutive counts every factor is a sum of exponentials in x, so the
  integral is evaluated term by term in closed form at 50 significant digits.
* GNMax (Gaussian noisy max): the same integral by adaptive quadrature.

``dp_ratio_audit`` enumerates add/remove-one-vote neighbours and returns the
largest absolute log-probability ratio.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Union

import mpmath
import numpy as np
from scipy import integrate, stats
from scipy.special import gammaln, logsumexp

from privadapt.mechanisms import InvalidInputError

MAX_ORACLE_DOMAIN = 6
MAX_AUDIT_COUNT = 20
KINDS = ("em", "gumbel_top1", "rnm_laplace", "gnmax")


@dataclass(frozen=True)
class MechanismSpec:
    """``kind`` plus its noise parameter.

    em / gumbel_top1: ``epsilon`` and ``sensitivity``.  rnm_laplace: ``epsilon``
    (scale 1/epsilon) or an explicit ``scale``.  gnmax: ``sigma``.
    ``epsilon == 0`` means infinite noise.
    """

    kind: str
    epsilon: Optional[float] = None
    sensitivity: float = 1.0
    sigma: Optional[float] = None
    scale: Optional[float] = None

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise InvalidInputError(f"unknown mechanism kind {self.kind!r}")


def _check_domain(values) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if v.ndim != 1 or v.size == 0:
        raise InvalidInputError("need a non-empty 1-D histogram or score vector")
    if v.size > MAX_ORACLE_DOMAIN:
        raise InvalidInputError(f"exact oracle refuses domains larger than {MAX_ORACLE_DOMAIN}")
    return v


def em_log_probabilities(scores, sensitivity: float, epsilon: float) -> np.ndarray:
    q = np.asarray(scores, dtype=float)
    if epsilon == 0:
        return np.full(q.size, -math.log(q.size))
    if math.isinf(epsilon):
        out = np.full(q.size, -np.inf)
        out[int(np.argmax(q))] = 0.0
        return out
    logits = epsilon * q / (2.0 * sensitivity)
    return logits - logsumexp(logits)


def _laplace_cdf_terms(c: mpmath.mpf, b: mpmath.mpf, below: bool) -> dict:
    """F(x) on one side of c as {rate: coefficient} meaning sum coef * e^(rate x / b)."""
    if below:
        return {1: mpmath.mpf("0.5") * mpmath.exp(-c / b)}
    return {0: mpmath.mpf(1), -1: -mpmath.mpf("0.5") * mpmath.exp(c / b)}


def _poly_mul(a: dict, b: dict) -> dict:
    out: dict = {}
    for ra, ca in a.items():
        for rb, cb in b.items():
            out[ra + rb] = out.get(ra + rb, 0) + ca * cb
    return out


def rnm_laplace_probabilities_exact(counts, scale: float, dps: int = 50) -> list:
    """Win probabilities of Laplace report-noisy-max as mpmath numbers."""
    c = [mpmath.mpf(float(x)) for x in counts]
    m = len(c)
    if m == 1:
        return [mpmath.mpf(1)]
    with mpmath.workdps(dps):
        b = mpmath.mpf(scale)
        knots = sorted(set(c))
        edges = [-mpmath.inf] + knots + [mpmath.inf]
        probs = []
        for i in range(m):
            total = mpmath.mpf(0)
            for lo, hi in zip(edges[:-1], edges[1:]):
                # representative point decides which branch each factor uses
                if lo == -mpmath.inf:
                    x0 = hi - 1
                elif hi == mpmath.inf:
                    x0 = lo + 1
                else:
                    x0 = (lo + hi) / 2
                if x0 < c[i]:
                    poly = {1: mpmath.exp(-c[i] / b) / (2 * b)}
                else:
                    poly = {-1: mpmath.exp(c[i] / b) / (2 * b)}
                for j in range(m):
                    if j != i:
                        poly = _poly_mul(poly, _laplace_cdf_terms(c[j], b, x0 < c[j]))
                for rate, coef in poly.items():
                    if coef == 0:
                        continue
                    if rate == 0:
                        total += coef * (hi - lo)
                    else:
                        r = mpmath.mpf(rate) / b
                        upper = 0 if hi == mpmath.inf else mpmath.exp(r * hi)
                        lower = 0 if lo == -mpmath.inf else mpmath.exp(r * lo)
                        total += coef * (upper - lower) / r
            probs.append(total)
    return probs


def rnm_laplace_probabilities_quad(counts, scale: float) -> np.ndarray:
    """Same quantity by plain adaptive quadrature (independent cross-check)."""
    c = np.asarray(counts, dtype=float)
    dist = stats.laplace
    lo, hi = c.min() - 60 * scale, c.max() + 60 * scale
    out = []
    for i in range(c.size):
        others = np.delete(c, i)

        def f(x, i=i, others=others):
            return dist.pdf(x, c[i], scale) * np.prod(dist.cdf(x, others, scale))

        val, _ = integrate.quad(f, lo, hi, points=sorted(set(c.tolist())), epsabs=1e-13, epsrel=1e-12, limit=400)
        out.append(val)
    return np.asarray(out)


def gnmax_probabilities(counts, sigma: float) -> np.ndarray:
    c = np.asarray(counts, dtype=float)
    if c.size == 1:
        return np.ones(1)
    lo, hi = c.min() - 40 * sigma, c.max() + 40 * sigma
    out = []
    for i in range(c.size):
        others = np.delete(c, i)

        def f(x, i=i, others=others):
            return stats.norm.pdf(x, c[i], sigma) * np.prod(stats.norm.cdf(x, others, sigma))

        val, _ = integrate.quad(f, lo, hi, points=sorted(set(c.tolist())), epsabs=1e-12, epsrel=1e-10, limit=400)
        out.append(val)
    return np.asarray(out)


def _noiseless(values: np.ndarray) -> np.ndarray:
    p = np.zeros(values.size)
    p[int(np.argmax(values))] = 1.0
    return p


def _laplace_scale(spec: MechanismSpec) -> float:
    if spec.scale is not None:
        return spec.scale
    if spec.epsilon is None:
        raise InvalidInputError("rnm_laplace needs epsilon or scale")
    return math.inf if spec.epsilon == 0 else (0.0 if math.isinf(spec.epsilon) else 1.0 / spec.epsilon)


def exact_log_distribution(spec: MechanismSpec, values) -> np.ndarray:
    """Natural-log output probabilities (high relative precision)."""
    v = _check_domain(values)
    if spec.kind in ("em", "gumbel_top1"):
        if spec.epsilon is None:
            raise InvalidInputError(f"{spec.kind} needs epsilon")
        return em_log_probabilities(v, spec.sensitivity, spec.epsilon)
    if spec.kind == "rnm_laplace":
        b = _laplace_scale(spec)
        if math.isinf(b):
            return np.full(v.size, -math.log(v.size))
        if b == 0:
            with np.errstate(divide="ignore"):
                return np.log(_noiseless(v))
        probs = rnm_laplace_probabilities_exact(v, b)
        # take logs at the precision the probabilities were computed in;
        # mpmath.log of a 50-digit value under a 15-digit context can be wrong
        with mpmath.workdps(50):
            return np.array([float(mpmath.log(p)) if p > 0 else -np.inf for p in probs])
    with np.errstate(divide="ignore"):
        return np.log(exact_mechanism_distribution(spec, v))


def exact_mechanism_distribution(spec: MechanismSpec, values) -> np.ndarray:
    """Output probability vector for a domain of at most six candidates."""
    v = _check_domain(values)
    if spec.kind == "gnmax":
        if spec.sigma is None or spec.sigma < 0:
            raise InvalidInputError("gnmax needs sigma >= 0")
        if spec.sigma == 0:
            return _noiseless(v)
        return gnmax_probabilities(v, spec.sigma)
    return np.exp(exact_log_distribution(spec, v))


def neighbours(counts: Sequence[int]):
    """Histograms reachable by adding or removing one vote."""
    c = np.asarray(counts, dtype=np.int64)
    for j in range(c.size):
        up = c.copy()
        up[j] += 1
        yield up
        if c[j] > 0:
            down = c.copy()
            down[j] -= 1
            yield down


def dp_ratio_audit(spec: Union[MechanismSpec, str], hist, epsilon: Optional[float] = None) -> float:
    """Largest |ln P(D)[o] - ln P(D')[o]| over one-vote neighbours D' and outcomes o.

    Pass for a pure-DP mechanism iff the result is at most epsilon + 1e-9.
    """
    if isinstance(spec, str):
        spec = MechanismSpec(spec)
    if epsilon is not None:
        spec = replace(spec, epsilon=epsilon)
    if spec.kind not in ("em", "gumbel_top1", "rnm_laplace"):
        raise InvalidInputError("ratio audit covers pure-DP mechanisms only")
    c = np.asarray(hist, dtype=np.int64)
    _check_domain(c)
    if c.min() < 0 or c.max() > MAX_AUDIT_COUNT:
        raise InvalidInputError(f"audit needs counts in [0, {MAX_AUDIT_COUNT}]")
    base = exact_log_distribution(spec, c)
    worst = 0.0
    for nb in neighbours(c):
        other = exact_log_distribution(spec, nb)
        both_zero = np.isneginf(base) & np.isneginf(other)
        diff = np.abs(np.where(both_zero, 0.0, base - other))
        worst = max(worst, float(np.max(diff)))
    return worst


def _compositions(n: int, k: int) -> np.ndarray:
    """All length-k nonnegative integer vectors summing to n."""
    rows = []
    for bars in itertools.combinations(range(n + k - 1), k - 1):
        prev = -1
        row = []
        for b in bars:
            row.append(b - prev - 1)
            prev = b
        row.append(n + k - 1 - prev - 1)
        rows.append(row)
    return np.asarray(rows, dtype=np.int64)


def majority_vote_accuracy(confusion, n_teachers: int, prior=None) -> float:
    """Exact accuracy of the plurality vote (ties to the lowest index).

    ``confusion[c, v]`` is the probability that a teacher votes ``v`` when the
    truth is ``c``; teachers are independent.
    """
    conf = np.asarray(confusion, dtype=float)
    k = conf.shape[0]
    prior = np.full(k, 1.0 / k) if prior is None else np.asarray(prior, dtype=float)
    comps = _compositions(n_teachers, k)
    log_coef = gammaln(n_teachers + 1) - gammaln(comps + 1).sum(axis=1)
    winners = np.argmax(comps, axis=1)
    acc = 0.0
    with np.errstate(divide="ignore"):
        log_conf = np.log(conf)
    for truth in range(k):
        mask = winners == truth
        if not mask.any():
            continue
        lp = log_coef[mask] + (comps[mask] * np.where(comps[mask] > 0, log_conf[truth], 0.0)).sum(axis=1)
        acc += prior[truth] * float(np.exp(lp).sum())
    return acc
