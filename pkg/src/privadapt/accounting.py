"""Renyi-DP accounting for Gaussian and Poisson-subsampled Gaussian mechanisms.

Bound used for subsampling: for integer order ``a`` the per-step RDP of the
Poisson-subsampled Gaussian with rate ``q`` and noise multiplier ``sigma`` is

    log( sum_{i=0..a} C(a, i) (1-q)^(a-i) q^i exp((i^2 - i) / (2 sigma^2)) ) / (a - 1)

(the binomial expansion of E_{z~N(0,s^2)}[((1-q) + q * N(1,s^2)(z)/N(0,s^2)(z))^a]).
It is evaluated in log space.  Only integer orders are supported for q < 1.

Conversion to (eps, delta) uses eps = min_a  rdp(a) + log(1/delta) / (a - 1).
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Any, Iterable, Optional, Sequence

import numpy as np
from scipy.special import gammaln, logsumexp

from privadapt.mechanisms import InvalidInputError, PrivacyBudget

DEFAULT_ORDERS: tuple[float, ...] = (
    1.25, 1.5, 1.75, *map(float, range(2, 65)), 80.0, 96.0, 112.0, 128.0, 160.0, 192.0, 224.0, 256.0,
)


class CalibrationError(RuntimeError):
    """No noise multiplier in the search bracket meets the target epsilon."""


class RdpOrderWarning(UserWarning):
    """Non-integer orders were dropped from a subsampled-Gaussian curve."""


@dataclass(frozen=True, eq=False)
class RdpCurve:
    orders: np.ndarray
    values: np.ndarray

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RdpCurve):
            return NotImplemented
        return np.array_equal(self.orders, other.orders) and np.array_equal(self.values, other.values)

    __hash__ = None  # type: ignore[assignment]

    def __post_init__(self) -> None:
        orders = np.asarray(self.orders, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if orders.ndim != 1 or orders.shape != values.shape:
            raise InvalidInputError("orders and values must be 1-D and of equal length")
        if np.any(orders <= 1) or np.any(np.diff(orders) <= 0):
            raise InvalidInputError("orders must be > 1 and strictly increasing")
        if np.any(np.isnan(values)) or np.any(values < 0):
            raise InvalidInputError("RDP values must be nonnegative")
        orders.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "orders", orders)
        object.__setattr__(self, "values", values)

    @classmethod
    def zero(cls, orders: Sequence[float] = DEFAULT_ORDERS) -> "RdpCurve":
        return cls(np.asarray(orders, dtype=float), np.zeros(len(orders)))

    def scaled(self, factor: float) -> "RdpCurve":
        return RdpCurve(self.orders, self.values * factor)

    def value_at(self, order: float) -> float:
        idx = np.flatnonzero(self.orders == order)
        if idx.size == 0:
            raise KeyError(order)
        return float(self.values[idx[0]])

    def to_dict(self) -> dict:
        return {"orders": self.orders.tolist(), "values": self.values.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "RdpCurve":
        return cls(np.asarray(d["orders"], dtype=float), np.asarray(d["values"], dtype=float))


@dataclass(frozen=True)
class SubsampledGaussianParams:
    sigma: float
    q: float
    steps: int = 1

    def __post_init__(self) -> None:
        if not self.sigma > 0:
            raise InvalidInputError(f"sigma must be positive, got {self.sigma}")
        if not 0 < self.q <= 1:
            raise InvalidInputError(f"sampling rate must be in (0, 1], got {self.q}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise InvalidInputError(f"steps must be a positive integer, got {self.steps}")


@dataclass(frozen=True)
class DeltaConvention:
    """Either an explicit delta or delta = 1 / dataset_size."""

    delta: Optional[float] = None
    dataset_size: Optional[int] = None

    def __post_init__(self) -> None:
        if (self.delta is None) == (self.dataset_size is None):
            raise InvalidInputError("give exactly one of delta or dataset_size")
        if not 0 < self.resolve() < 1:
            raise InvalidInputError("resulting delta must lie in (0, 1)")

    def resolve(self) -> float:
        if self.delta is not None:
            return float(self.delta)
        return 1.0 / self.dataset_size

    @classmethod
    def one_over_n(cls, n: int) -> "DeltaConvention":
        return cls(dataset_size=n)

    @classmethod
    def explicit(cls, delta: float) -> "DeltaConvention":
        return cls(delta=delta)


def _orders(orders: Sequence[float]) -> np.ndarray:
    arr = np.asarray(orders, dtype=float)
    if arr.size == 0:
        raise InvalidInputError("order grid is empty")
    return arr


def rdp_gaussian(sigma: float, orders: Sequence[float] = DEFAULT_ORDERS, sensitivity: float = 1.0) -> RdpCurve:
    """RDP of the Gaussian mechanism: order * sensitivity^2 / (2 sigma^2)."""
    if not sigma > 0:
        raise InvalidInputError(f"sigma must be positive, got {sigma}")
    a = _orders(orders)
    if math.isinf(sigma):
        return RdpCurve(a, np.zeros_like(a))
    return RdpCurve(a, a * sensitivity**2 / (2.0 * sigma**2))


def _log_a_int(q: float, sigma: float, alpha: int) -> float:
    i = np.arange(alpha + 1, dtype=float)
    log_binom = gammaln(alpha + 1) - gammaln(i + 1) - gammaln(alpha - i + 1)
    terms = log_binom + i * math.log(q) + (alpha - i) * math.log1p(-q) + (i * i - i) / (2.0 * sigma**2)
    return float(logsumexp(terms))


def integer_orders(orders: Sequence[float]) -> np.ndarray:
    a = _orders(orders)
    return a[a == np.round(a)]


def rdp_subsampled_gaussian(
    params: SubsampledGaussianParams, orders: Sequence[float] = DEFAULT_ORDERS
) -> RdpCurve:
    """RDP of ``params.steps`` compositions of the Poisson-subsampled Gaussian.

    With q == 1 this is the plain Gaussian curve on the full grid.  With q < 1
    non-integer orders are dropped (with an ``RdpOrderWarning``).
    """
    if params.q == 1.0:
        return rdp_gaussian(params.sigma, orders).scaled(params.steps)
    a = _orders(orders)
    ints = integer_orders(a)
    if ints.size < a.size:
        warnings.warn(
            "subsampled Gaussian RDP is only evaluated at integer orders; "
            f"dropped {a.size - ints.size} non-integer order(s)",
            RdpOrderWarning,
            stacklevel=2,
        )
    if ints.size == 0:
        raise InvalidInputError("no integer orders in grid")
    vals = np.array([_log_a_int(params.q, params.sigma, int(al)) / (al - 1.0) for al in ints])
    return RdpCurve(ints, np.maximum(vals, 0.0) * params.steps)


def compose(curves: Iterable[RdpCurve]) -> RdpCurve:
    """Pointwise sum of RDP curves sharing one order grid."""
    curves = list(curves)
    if not curves:
        raise InvalidInputError("nothing to compose")
    orders = curves[0].orders
    total = np.zeros_like(orders)
    for c in curves:
        if c.orders.shape != orders.shape or not np.array_equal(c.orders, orders):
            raise InvalidInputError("cannot compose curves with different order grids")
        total = total + c.values
    return RdpCurve(orders, total)


def to_eps_delta(curve: RdpCurve, delta: float) -> tuple[float, float]:
    """Return ``(epsilon, best_order)`` for the given delta."""
    if curve.orders.size == 0:
        raise InvalidInputError("empty RDP curve")
    if not 0 < delta < 1:
        raise InvalidInputError(f"delta must lie in (0, 1), got {delta}")
    eps = curve.values + math.log(1.0 / delta) / (curve.orders - 1.0)
    i = int(np.argmin(eps))
    return float(eps[i]), float(curve.orders[i])


def epsilon_for(
    sigma: float, q: float, steps: int, delta: float, orders: Sequence[float] = DEFAULT_ORDERS
) -> tuple[float, float]:
    """Accountant epsilon (and best order) for a subsampled Gaussian run."""
    grid = orders if q == 1.0 else integer_orders(orders)
    curve = rdp_subsampled_gaussian(SubsampledGaussianParams(sigma, q, steps), grid)
    return to_eps_delta(curve, delta)


def calibrate_sigma(
    target_eps: float,
    delta: float,
    q: float,
    steps: int,
    orders: Sequence[float] = DEFAULT_ORDERS,
    *,
    lo: float = 0.3,
    hi: float = 100.0,
    tol: float = 1e-4,
) -> float:
    """Smallest noise multiplier (to ``tol``) whose accountant epsilon lands in
    ``[0.99 * target_eps, target_eps]``."""
    if not target_eps > 0:
        raise InvalidInputError("target epsilon must be positive")

    def eps(s: float) -> float:
        return epsilon_for(s, q, steps, delta, orders)[0]

    if eps(hi) > target_eps:
        raise CalibrationError(f"epsilon {target_eps} unreachable with sigma <= {hi}")
    if eps(lo) <= target_eps:
        if eps(lo) >= 0.99 * target_eps:
            return lo
        raise CalibrationError(f"sigma={lo} already gives epsilon below {0.99 * target_eps}")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if eps(mid) <= target_eps:
            hi = mid
        else:
            lo = mid
    got = eps(hi)
    if not 0.99 * target_eps <= got <= target_eps:
        raise CalibrationError(f"bisection ended at epsilon {got}, outside 1% of {target_eps}")
    return hi


@dataclass(frozen=True)
class Spent:
    """Cumulative (epsilon, delta); unlike ``PrivacyBudget`` zero is allowed."""

    epsilon: float = 0.0
    delta: float = 0.0

    def __add__(self, other: "Spent") -> "Spent":
        return Spent(self.epsilon + other.epsilon, self.delta + other.delta)


def basic_composition(per_call: PrivacyBudget, n_calls: int) -> Spent:
    if n_calls < 0:
        raise InvalidInputError("n_calls must be nonnegative")
    eps = per_call.epsilon * n_calls
    delta = per_call.delta * n_calls
    if not (math.isfinite(eps) and math.isfinite(delta)):
        raise OverflowError("composed budget is not finite")
    return Spent(eps, delta)


def advanced_composition(per_call: PrivacyBudget, n_calls: int, delta_slack: float) -> Spent:
    """Advanced composition: k-fold (eps, delta) -> (eps', k*delta + delta_slack)."""
    if n_calls < 0:
        raise InvalidInputError("n_calls must be nonnegative")
    if not 0 < delta_slack < 1:
        raise InvalidInputError("delta_slack must lie in (0, 1)")
    if n_calls == 0:
        return Spent()
    e = per_call.epsilon
    eps = math.sqrt(2 * n_calls * math.log(1 / delta_slack)) * e + n_calls * e * math.expm1(e)
    return Spent(eps, n_calls * per_call.delta + delta_slack)


@dataclass
class LedgerEntry:
    mechanism: str
    epsilon: float
    delta: float
    alpha: Optional[float] = None
    metadata: dict[str, Any] = field(default_factory=dict)
    rdp: Optional[RdpCurve] = None

    def to_dict(self) -> dict:
        out = {
            "mechanism": self.mechanism,
            "epsilon": self.epsilon,
            "delta": self.delta,
            "alpha": self.alpha,
            "metadata": self.metadata,
        }
        if self.rdp is not None:
            out["rdp"] = self.rdp.to_dict()
        return out


@dataclass
class PrivacyLedger:
    """Ordered record of privacy charges.

    Pure entries carry (epsilon, delta) and compose by summation.  RDP entries
    additionally carry a curve; their reported epsilon is the stand-alone
    conversion at ``report_delta``.
    """

    entries: list[LedgerEntry] = field(default_factory=list)
    report_delta: float = 1e-5

    def __len__(self) -> int:
        return len(self.entries)

    def charge(self, mechanism: str, epsilon: float, delta: float = 0.0, **metadata: Any) -> LedgerEntry:
        entry = LedgerEntry(mechanism, float(epsilon), float(delta), None, metadata)
        self.entries.append(entry)
        return entry

    def charge_rdp(
        self, mechanism: str, curve: RdpCurve, report_delta: Optional[float] = None, **metadata: Any
    ) -> LedgerEntry:
        if report_delta is None:
            report_delta = self.report_delta
        eps, alpha = to_eps_delta(curve, report_delta)
        entry = LedgerEntry(mechanism, eps, float(report_delta), alpha, metadata, curve)
        self.entries.append(entry)
        return entry

    def extend(self, other: "PrivacyLedger") -> None:
        self.entries.extend(other.entries)

    def basic_total(self) -> Spent:
        # fsum is exactly rounded, so n equal charges give exactly n * eps
        return Spent(math.fsum(e.epsilon for e in self.entries), math.fsum(e.delta for e in self.entries))

    def rdp_total(self) -> RdpCurve:
        curves = [e.rdp for e in self.entries if e.rdp is not None]
        if len(curves) != len(self.entries):
            raise InvalidInputError("ledger mixes pure and RDP entries; use basic_total()")
        return compose(curves)

    def rdp_epsilon(self, delta: float) -> tuple[float, float]:
        return to_eps_delta(self.rdp_total(), delta)

    def to_json(self, **kwargs: Any) -> str:
        return json.dumps([e.to_dict() for e in self.entries], **kwargs)
