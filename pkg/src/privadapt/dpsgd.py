"""Toy DPSGD for convex models (logistic and least-squares regression).

The noisy gradient is divided by the *expected* batch size ``q * n`` so the
sensitivity of the summed, clipped gradient stays exactly ``clip_norm``.  An
empty Poisson batch still takes a (pure noise) step.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from privadapt.accounting import (
    DEFAULT_ORDERS,
    DeltaConvention,
    PrivacyLedger,
    RdpCurve,
    SubsampledGaussianParams,
    integer_orders,
    rdp_subsampled_gaussian,
)
from privadapt.mechanisms import InvalidInputError
from privadapt.rng import RngLike, RngStream, as_generator

LOSSES = ("logistic", "squared")


class TrainingError(RuntimeError):
    """Weights became non-finite during training."""


@dataclass(frozen=True)
class ToyDataset:
    features: np.ndarray
    targets: np.ndarray

    def __post_init__(self) -> None:
        x = np.atleast_2d(np.asarray(self.features, dtype=float))
        y = np.asarray(self.targets, dtype=float).ravel()
        if x.shape[0] < 1 or x.shape[0] != y.shape[0]:
            raise InvalidInputError("need n >= 1 rows and one target per row")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise InvalidInputError("dataset contains non-finite values")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "targets", y)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @classmethod
    def from_csv(cls, path: str | Path) -> "ToyDataset":
        """Header row required; last column is the target."""
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        if len(rows) < 2:
            raise InvalidInputError(f"{path}: expected a header and at least one row")
        data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
        return cls(data[:, :-1], data[:, -1])


@dataclass(frozen=True)
class DpSgdConfig:
    clip_norm: float
    noise_multiplier: float
    sampling_rate: float
    steps: int
    learning_rate: float
    loss: str = "logistic"
    delta: Optional[DeltaConvention] = None  # None -> 1/n
    orders: tuple[float, ...] = DEFAULT_ORDERS

    def __post_init__(self) -> None:
        if not self.clip_norm > 0:
            raise InvalidInputError("clip_norm must be positive")
        if not (self.noise_multiplier >= 0 and math.isfinite(self.noise_multiplier)):
            raise InvalidInputError("noise_multiplier must be finite and nonnegative")
        if not 0 < self.sampling_rate <= 1:
            raise InvalidInputError("sampling_rate must lie in (0, 1]")
        if int(self.steps) != self.steps or self.steps < 1:
            raise InvalidInputError("steps must be a positive integer")
        if not self.learning_rate > 0:
            raise InvalidInputError("learning_rate must be positive")
        if self.loss not in LOSSES:
            raise InvalidInputError(f"loss must be one of {LOSSES}")

    def resolve_delta(self, n: int) -> float:
        return (self.delta or DeltaConvention.one_over_n(n)).resolve()


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def per_example_loss(weights, x, y, loss: str = "logistic") -> float:
    z = float(np.dot(weights, x))
    if loss == "logistic":
        # log(1 + e^z) - y z, stable
        return float(np.logaddexp(0.0, z) - y * z)
    return 0.5 * (z - y) ** 2


def per_sample_gradient(weights, x, y, loss: str = "logistic") -> np.ndarray:
    """Analytic gradient of the per-example loss with respect to the weights."""
    w = np.asarray(weights, dtype=float)
    x = np.asarray(x, dtype=float)
    if w.shape != x.shape:
        raise InvalidInputError(f"weights {w.shape} and features {x.shape} disagree")
    z = float(np.dot(w, x))
    if loss == "logistic":
        return (float(_sigmoid(z)) - y) * x
    if loss == "squared":
        return (z - y) * x
    raise InvalidInputError(f"unknown loss {loss!r}")


def per_sample_gradients(weights, features, targets, loss: str = "logistic") -> np.ndarray:
    """Row ``i`` is ``per_sample_gradient(weights, features[i], targets[i])``."""
    z = features @ weights
    resid = _sigmoid(z) - targets if loss == "logistic" else z - targets
    return resid[:, None] * features


def clip(gradient, clip_norm: float) -> np.ndarray:
    g = np.asarray(gradient, dtype=float)
    norm = float(np.linalg.norm(g))
    if norm <= clip_norm:
        return g.copy()
    return g * (clip_norm / norm)


def clip_rows(grads: np.ndarray, clip_norm: float) -> np.ndarray:
    norms = np.linalg.norm(grads, axis=1)
    factor = np.ones_like(norms)
    over = norms > clip_norm
    factor[over] = clip_norm / norms[over]
    return grads * factor[:, None]


@dataclass
class StepOutcome:
    weights: np.ndarray
    batch_size: int
    max_clipped_norm: float


def _step_curve(config: DpSgdConfig) -> Optional[RdpCurve]:
    if config.noise_multiplier == 0:
        return None
    grid = config.orders if config.sampling_rate == 1.0 else integer_orders(config.orders)
    params = SubsampledGaussianParams(config.noise_multiplier, config.sampling_rate, 1)
    return rdp_subsampled_gaussian(params, grid)


def dpsgd_step(
    weights,
    dataset: ToyDataset,
    config: DpSgdConfig,
    rng: RngLike,
    ledger: Optional[PrivacyLedger] = None,
    *,
    _curve=None,
) -> StepOutcome:
    """One Poisson-sampled, clipped, noised gradient step.

    Appends one subsampled-Gaussian entry to ``ledger`` when given.  With
    ``noise_multiplier == 0`` the entry has infinite epsilon.
    """
    gen = as_generator(rng)
    w = np.asarray(weights, dtype=float)
    n = dataset.n
    mask = gen.random(n) < config.sampling_rate
    x, y = dataset.features[mask], dataset.targets[mask]
    raw = per_sample_gradients(w, x, y, config.loss)
    with np.errstate(over="ignore", invalid="ignore"):
        raw_norms = np.linalg.norm(raw, axis=1)
    if not np.all(np.isfinite(raw_norms)):
        # clipping an infinite norm would silently zero the gradient
        raise TrainingError("per-sample gradient overflowed")
    grads = clip_rows(raw, config.clip_norm)
    max_norm = float(np.linalg.norm(grads, axis=1).max()) if len(grads) else 0.0
    assert max_norm <= config.clip_norm * (1 + 1e-12), "clipped gradient exceeds clip norm"
    total = grads.sum(axis=0) if len(grads) else np.zeros_like(w)
    sigma = config.noise_multiplier * config.clip_norm
    if sigma > 0:
        total = total + gen.normal(0.0, sigma, size=w.shape)
    new_w = w - config.learning_rate * total / (config.sampling_rate * n)

    if ledger is not None:
        delta = config.resolve_delta(n)
        meta = {"sigma": config.noise_multiplier, "q": config.sampling_rate, "clip_norm": config.clip_norm}
        curve = _curve if _curve is not None else _step_curve(config)
        if curve is None:
            ledger.charge("subsampled_gaussian", math.inf, delta, **meta)
        else:
            ledger.charge_rdp("subsampled_gaussian", curve, delta, **meta)
    return StepOutcome(new_w, int(mask.sum()), max_norm)


@dataclass
class TrainResult:
    weights: np.ndarray
    epsilon: float
    delta: float
    best_order: Optional[float]
    ledger: PrivacyLedger = field(repr=False)
    trajectory: list[np.ndarray] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "epsilon": self.epsilon,
            "delta": self.delta,
            "best_order": self.best_order,
            "ledger": [e.to_dict() for e in self.ledger.entries],
        }


def train(
    dataset: ToyDataset,
    config: DpSgdConfig,
    rng: RngLike,
    *,
    initial_weights=None,
    keep_trajectory: bool = False,
) -> TrainResult:
    """Run ``config.steps`` DPSGD steps and report epsilon at the configured delta."""
    gen = as_generator(rng)
    d = dataset.features.shape[1]
    w = np.zeros(d) if initial_weights is None else np.asarray(initial_weights, dtype=float).copy()
    ledger = PrivacyLedger()
    curve = _step_curve(config)
    trajectory = []
    for _ in range(config.steps):
        w = dpsgd_step(w, dataset, config, gen, ledger, _curve=curve).weights
        if not np.all(np.isfinite(w)):
            raise TrainingError("weights diverged")
        if keep_trajectory:
            trajectory.append(w.copy())
    delta = config.resolve_delta(dataset.n)
    if curve is None:
        eps, order = math.inf, None
    else:
        eps, order = ledger.rdp_epsilon(delta)
    return TrainResult(w, eps, delta, order, ledger, trajectory)


def accuracy(weights, dataset: ToyDataset) -> float:
    pred = (dataset.features @ np.asarray(weights)) > 0
    return float(np.mean(pred == (dataset.targets > 0.5)))


def make_separable_dataset(n: int = 200, margin: float = 0.5, rng: RngLike | None = None) -> ToyDataset:
    """2-D points labelled by the sign of x0 + x1, with a bias column appended."""
    gen = as_generator(rng if rng is not None else RngStream(0))
    pts = []
    while len(pts) < n:
        p = gen.uniform(-3, 3, size=2)
        if abs(p[0] + p[1]) / math.sqrt(2) >= margin:
            pts.append(p)
    x = np.asarray(pts)
    y = (x[:, 0] + x[:, 1] > 0).astype(float)
    return ToyDataset(np.column_stack([x, np.ones(n)]), y)
