"""Simulated-teacher scenarios producing privacy-utility trade-off curves.

Teachers are described by an accuracy (or a confusion matrix) rather than by a
language model.  For trial ``t`` the teacher outputs come from sub-stream
``(t, 0)`` and mechanism noise from ``(t, 1)``; the noise stream restarts at
every grid point, so all epsilons of a trial see the same votes and the same
standardised noise (common random numbers).

GNMax noise at a grid point is the sigma calibrated to ``(epsilon, delta)`` for
a single Gaussian release with unit sensitivity.  Report-noisy-max uses
Laplace(1/epsilon).  Generation budgets are per query (KSA) or per generated
sequence (token-level generation, split evenly across ``t_max`` tokens).
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from privadapt.accounting import calibrate_sigma
from privadapt.aggregation import (
    GenerationBudget,
    KeywordExtraction,
    TokenEnsemble,
    fewshotgen_generate,
    ksa_select,
)
from privadapt.mechanisms import (
    InvalidInputError,
    PrivacyBudget,
    exponential_mechanism,
    gnmax,
    gumbel_topk,
    report_noisy_max,
)
from privadapt.rng import RngStream

DEFAULT_GRID = (0.1, 0.3, 0.7, 1.0, 3.0, 8.0)
CLASSIFICATION_MECHANISMS = ("gnmax", "rnm_laplace", "em", "gumbel")
GENERATION_MECHANISMS = ("ksa_ptr", "ksa_gumbel", "fewshotgen")
CSV_COLUMNS = ("epsilon", "utility_mean", "utility_std", "trials", "abstain_rate")


class ScenarioError(InvalidInputError):
    """Scenario failed validation; the message names the offending field."""


@dataclass(frozen=True)
class SimTeacherModel:
    accuracy: float = 0.9
    n_classes: int = 4
    error_model: str = "uniform_over_wrong"
    confusion: Optional[tuple[tuple[float, ...], ...]] = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.accuracy <= 1.0:
            raise ScenarioError("teacher.accuracy must lie in [0, 1]")
        if self.n_classes < 1:
            raise ScenarioError("teacher.n_classes must be positive")
        if self.error_model not in ("uniform_over_wrong", "confusion_matrix"):
            raise ScenarioError(f"teacher.error_model {self.error_model!r} not recognised")
        if self.error_model == "confusion_matrix":
            if self.confusion is None:
                raise ScenarioError("teacher.confusion required for confusion_matrix error model")
            m = np.asarray(self.confusion, dtype=float)
            if m.shape != (self.n_classes, self.n_classes) or np.any(m < 0):
                raise ScenarioError("teacher.confusion must be a nonnegative n_classes x n_classes matrix")
            if not np.allclose(m.sum(axis=1), 1.0, atol=1e-9):
                raise ScenarioError("teacher.confusion rows must sum to 1")
            if not np.allclose(np.diag(m), self.accuracy, atol=1e-9):
                raise ScenarioError("teacher.accuracy must match the confusion diagonal")

    def confusion_matrix(self) -> np.ndarray:
        if self.error_model == "confusion_matrix":
            return np.asarray(self.confusion, dtype=float)
        k = self.n_classes
        if k == 1:
            return np.ones((1, 1))
        m = np.full((k, k), (1.0 - self.accuracy) / (k - 1))
        np.fill_diagonal(m, self.accuracy)
        return m


@dataclass(frozen=True)
class ScenarioConfig:
    task: str = "classification"
    mechanism: str = "gnmax"
    n_teachers: int = 25
    n_queries: int = 100
    trials: int = 50
    teacher: SimTeacherModel = field(default_factory=SimTeacherModel)
    epsilon_grid: tuple[float, ...] = DEFAULT_GRID
    delta: float = 1e-5
    # generation shape
    vocab_size: int = 1000
    seq_len: int = 10
    k: Optional[int] = None  # keywords released by KSA; defaults to seq_len
    t_max: int = 10
    # DP-FewShotGen reference shape (descriptive; n_teachers drives the simulation)
    mn: int = 80
    m: int = 20

    def __post_init__(self) -> None:
        for name in ("n_teachers", "n_queries", "trials", "vocab_size", "seq_len", "mn", "m"):
            if int(getattr(self, name)) < 1:
                raise ScenarioError(f"{name} must be a positive integer")
        if self.t_max < 0:
            raise ScenarioError("t_max must be nonnegative")
        if self.task == "classification":
            if self.mechanism not in CLASSIFICATION_MECHANISMS:
                raise ScenarioError(f"mechanism must be one of {CLASSIFICATION_MECHANISMS}")
        elif self.task == "generation":
            if self.mechanism not in GENERATION_MECHANISMS:
                raise ScenarioError(f"mechanism must be one of {GENERATION_MECHANISMS}")
            if self.seq_len > self.vocab_size:
                raise ScenarioError("seq_len must not exceed vocab_size")
        else:
            raise ScenarioError("task must be 'classification' or 'generation'")
        grid = tuple(float(e) for e in self.epsilon_grid)
        if not grid or any(not e > 0 for e in grid):
            raise ScenarioError("epsilon_grid must be non-empty and positive")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ScenarioError("epsilon_grid must be sorted ascending")
        object.__setattr__(self, "epsilon_grid", grid)
        if not 0 < self.delta < 1:
            raise ScenarioError("delta must lie in (0, 1)")
        if self.k is not None and not 1 <= self.k:
            raise ScenarioError("k must be positive")

    @property
    def keywords_released(self) -> int:
        return self.seq_len if self.k is None else self.k

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ScenarioError(f"unknown scenario field(s): {sorted(unknown)}")
        if "teacher" in d:
            t = dict(d["teacher"])
            bad = set(t) - set(SimTeacherModel.__dataclass_fields__)
            if bad:
                raise ScenarioError(f"unknown teacher field(s): {sorted(bad)}")
            if t.get("confusion") is not None:
                t["confusion"] = tuple(tuple(float(v) for v in row) for row in t["confusion"])
            d["teacher"] = SimTeacherModel(**t)
        if "epsilon_grid" in d:
            d["epsilon_grid"] = tuple(float(e) for e in d["epsilon_grid"])
        for name in ("n_teachers", "n_queries", "trials", "vocab_size", "seq_len", "t_max", "mn", "m"):
            if name in d and (isinstance(d[name], bool) or not isinstance(d[name], int)):
                raise ScenarioError(f"{name} must be an integer")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> "ScenarioConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                return cls.from_dict(json.load(fh))
            except json.JSONDecodeError as exc:
                raise ScenarioError(f"{path}: invalid JSON ({exc})") from exc

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TradeoffPoint:
    epsilon: float
    utility_mean: float
    utility_std: float
    trials: int
    abstain_rate: float = 0.0


@dataclass
class TradeoffCurve:
    points: list[TradeoffPoint]
    per_trial: np.ndarray = field(repr=False)  # shape (grid, trials)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for p in self.points:
            w.writerow([_fmt(p.epsilon), _fmt(p.utility_mean), _fmt(p.utility_std), p.trials, _fmt(p.abstain_rate)])
        return buf.getvalue()

    def paired_monotonicity_violations(self, n_se: float = 2.0) -> list[tuple[float, float, float, float]]:
        """Consecutive grid pairs where utility drops by more than ``n_se``
        standard errors of the paired per-trial difference."""
        bad = []
        for i in range(len(self.points) - 1):
            d = self.per_trial[i + 1] - self.per_trial[i]
            se = float(d.std(ddof=1) / math.sqrt(d.size)) if d.size > 1 else 0.0
            if d.mean() < -n_se * se - 1e-12:
                bad.append((self.points[i].epsilon, self.points[i + 1].epsilon, float(d.mean()), se))
        return bad


def _fmt(x: float) -> str:
    if math.isinf(x):
        return "inf"
    return format(float(x), ".10g")


def _summarise(grid, utilities: np.ndarray, abstains: np.ndarray) -> TradeoffCurve:
    trials = utilities.shape[1]
    points = []
    for i, eps in enumerate(grid):
        u = utilities[i]
        std = float(u.std(ddof=1)) if trials > 1 else 0.0
        points.append(TradeoffPoint(eps, float(u.mean()), std, trials, float(abstains[i].mean())))
    return TradeoffCurve(points, utilities)


def _map_trials(fn: Callable[[int], tuple], trials: int, threads: int) -> list:
    if threads <= 1:
        return [fn(t) for t in range(trials)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(trials)))


def _classification_selector(mechanism: str, eps: float, delta: float):
    if math.isinf(eps):
        return lambda counts, gen: int(np.argmax(counts))
    if mechanism == "gnmax":
        sigma = calibrate_sigma(eps, delta, 1.0, 1)
        return lambda counts, gen: gnmax(counts, sigma, gen)
    if mechanism == "rnm_laplace":
        return lambda counts, gen: report_noisy_max(counts, eps, gen)
    if mechanism == "em":
        return lambda counts, gen: exponential_mechanism(counts, 1.0, eps, gen)
    return lambda counts, gen: gumbel_topk(counts, 1.0, eps, 1, gen)[0]


def sample_votes(model: SimTeacherModel, n_teachers: int, n_queries: int, gen: np.random.Generator):
    """Ground truth per query and one vote per (query, teacher)."""
    truth = gen.integers(model.n_classes, size=n_queries)
    cum = np.cumsum(model.confusion_matrix(), axis=1)
    cum[:, -1] = 1.0
    u = gen.random((n_queries, n_teachers))
    votes = np.array([np.searchsorted(cum[truth[q]], u[q], side="right") for q in range(n_queries)])
    return truth, votes


def simulate_classification(
    scenario: ScenarioConfig, seed: int, *, threads: int = 1, grid: Optional[Sequence[float]] = None
) -> TradeoffCurve:
    """Fraction of queries whose private label equals the ground truth, per
    grid epsilon.  ``grid`` may include ``math.inf`` (noiseless argmax)."""
    if scenario.task != "classification":
        raise ScenarioError("scenario task is not classification")
    grid = tuple(scenario.epsilon_grid if grid is None else grid)
    selectors = [_classification_selector(scenario.mechanism, e, scenario.delta) for e in grid]
    root = RngStream(seed)
    k = scenario.teacher.n_classes

    def run(t: int):
        truth, votes = sample_votes(scenario.teacher, scenario.n_teachers, scenario.n_queries, root.substream(t, 0).generator())
        hists = [np.bincount(v, minlength=k) for v in votes]
        utils = []
        for select in selectors:
            noise = root.substream(t, 1).generator()
            hits = sum(select(h, noise) == truth[q] for q, h in enumerate(hists))
            utils.append(hits / scenario.n_queries)
        return utils

    results = _map_trials(run, scenario.trials, threads)
    utilities = np.asarray(results, dtype=float).T
    return _summarise(grid, utilities, np.zeros_like(utilities))


def _noisy_copy(truth: np.ndarray, p: float, vocab: int, gen: np.random.Generator) -> np.ndarray:
    keep = gen.random(truth.size) < p
    return np.where(keep, truth, gen.integers(vocab, size=truth.size))


def simulate_generation(
    scenario: ScenarioConfig, seed: int, *, threads: int = 1, grid: Optional[Sequence[float]] = None
) -> TradeoffCurve:
    """Keyword recall (KSA mechanisms) or token exact-match rate (token-level
    generation) against a simulated ground-truth sequence."""
    if scenario.task != "generation":
        raise ScenarioError("scenario task is not generation")
    grid = tuple(scenario.epsilon_grid if grid is None else grid)
    root = RngStream(seed)
    p = scenario.teacher.accuracy
    L, V, n = scenario.seq_len, scenario.vocab_size, scenario.n_teachers
    k = scenario.keywords_released
    extraction = KeywordExtraction(max_keywords_per_teacher=max(L, 1))

    def run(t: int):
        data = root.substream(t, 0).generator()
        truths = [data.choice(V, size=L, replace=False) for _ in range(scenario.n_queries)]
        if scenario.mechanism == "fewshotgen":
            width = max(scenario.t_max, L)
            proposals = [
                np.stack([_noisy_copy(np.resize(tr, width), p, V, data) for _ in range(n)]) for tr in truths
            ]
        else:
            outputs = [[[str(x) for x in _noisy_copy(tr, p, V, data)] for _ in range(n)] for tr in truths]
        utils, abst = [], []
        for eps in grid:
            noise = root.substream(t, 1)
            hits, abstained = 0.0, 0
            for q, tr in enumerate(truths):
                qs = noise.substream(q)
                if scenario.mechanism == "fewshotgen":
                    hits += _generate_exact_match(proposals[q], tr, eps, scenario.t_max, qs)
                    continue
                method = "ptr" if scenario.mechanism == "ksa_ptr" else "gumbel_topk"
                budget = PrivacyBudget(eps, scenario.delta)
                got = ksa_select(outputs[q], extraction, k, budget, method, qs)
                if got is None:
                    abstained += 1
                    continue
                hits += len(set(got) & {str(x) for x in tr}) / L
            utils.append(hits / scenario.n_queries)
            abst.append(abstained / scenario.n_queries)
        return utils, abst

    results = _map_trials(run, scenario.trials, threads)
    utilities = np.asarray([r[0] for r in results], dtype=float).T
    abstains = np.asarray([r[1] for r in results], dtype=float).T
    return _summarise(grid, utilities, abstains)


def _generate_exact_match(proposals: np.ndarray, truth: np.ndarray, eps: float, t_max: int, rng: RngStream) -> float:
    # proposals[teacher, position] is what the teacher proposes at that position,
    # whatever prefix was released
    if t_max == 0:
        return 0.0
    ensemble = TokenEnsemble(proposals.shape[0], lambda prefix, t: int(proposals[t, len(prefix)]))
    budget = GenerationBudget(PrivacyBudget(eps), eps / t_max, t_max)
    tokens = fewshotgen_generate(ensemble, budget, None, rng).tokens
    hits = sum(int(a == b) for a, b in zip(tokens, truth))
    return hits / truth.size


def simulate(scenario: ScenarioConfig, seed: int, *, threads: int = 1) -> TradeoffCurve:
    if scenario.task == "classification":
        return simulate_classification(scenario, seed, threads=threads)
    return simulate_generation(scenario, seed, threads=threads)
