"""Private teacher-ensemble protocols built from the selection primitives.

* PATE-style label release (GNMax over teacher votes) and student prompt
  construction from privately labelled public inputs.
* Keyword-space aggregation: a clamped keyword presence histogram over teacher
  outputs, released with propose-test-release or Gumbel top-k.
* Per-token private generation from disjoint teacher subsets, and its
  combination with student construction for generation tasks.

Randomness: when ``rng`` is an ``RngStream`` each query/token gets its own
sub-stream, so results do not depend on processing order.  A numpy
``Generator`` is consumed sequentially instead.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Callable, Hashable, Optional, Sequence

import numpy as np

from privadapt.accounting import PrivacyLedger, Spent, rdp_gaussian
from privadapt.mechanisms import (
    CandidateDomain,
    InvalidInputError,
    PrivacyBudget,
    VoteHistogram,
    gnmax,
    gumbel_topk,
    ptr_topk,
)
from privadapt.rng import RngLike, RngStream


class ProtocolError(RuntimeError):
    """A teacher callback failed or answered outside the candidate domain."""

    def __init__(self, message: str, teacher_index: Optional[int] = None):
        super().__init__(message)
        self.teacher_index = teacher_index


class EmptyHistogramError(InvalidInputError):
    pass


class StudentConstructionError(RuntimeError):
    pass


def _sub(rng: RngLike, *keys: int) -> RngLike:
    return rng.substream(*keys) if isinstance(rng, RngStream) else rng


@dataclass
class TeacherEnsemble:
    """``answer(query, teacher_index)`` returns a class index (classification)
    or an output text / token sequence (generation)."""

    n_teachers: int
    answer: Callable[[Any, int], Any]
    domain: Optional[CandidateDomain] = None

    def __post_init__(self) -> None:
        if self.n_teachers < 1:
            raise InvalidInputError("ensemble needs at least one teacher")

    def answers(self, query: Any) -> list:
        out = []
        for t in range(self.n_teachers):
            try:
                out.append(self.answer(query, t))
            except Exception as exc:  # noqa: BLE001 - surfaced with teacher index
                raise ProtocolError(f"teacher {t} failed: {exc}", t) from exc
        return out


@dataclass
class TokenEnsemble:
    """``next_token(prefix, teacher_index)`` proposes the next token id given the
    publicly released prefix."""

    n_teachers: int
    next_token: Callable[[tuple, int], int]

    def __post_init__(self) -> None:
        if self.n_teachers < 1:
            raise InvalidInputError("ensemble needs at least one teacher")


_WORD = re.compile(r"[\w']+")


def whitespace_keywords(text) -> list[str]:
    """Lower-cased word tokens; sequences are treated as pre-tokenised."""
    if isinstance(text, str):
        return _WORD.findall(text.lower())
    return [str(t).lower() for t in text]


@dataclass(frozen=True)
class KeywordExtraction:
    tokenizer: Callable[[Any], Sequence[Hashable]] = whitespace_keywords
    max_keywords_per_teacher: int = 10

    def __post_init__(self) -> None:
        if self.max_keywords_per_teacher < 1:
            raise InvalidInputError("max_keywords_per_teacher must be positive")

    def keywords(self, text) -> list:
        """Distinct keywords in first-seen order, clamped."""
        seen: dict = {}
        for kw in self.tokenizer(text):
            if kw not in seen:
                seen[kw] = None
                if len(seen) == self.max_keywords_per_teacher:
                    break
        return list(seen)


def keyword_histogram(teacher_texts: Sequence, extraction: KeywordExtraction) -> VoteHistogram:
    """Presence counts: each teacher adds at most one vote per keyword and at
    most ``max_keywords_per_teacher`` votes in total.  Labels follow first
    appearance across teachers."""
    index: dict = {}
    counts: list[int] = []
    for text in teacher_texts:
        for kw in extraction.keywords(text):
            if kw not in index:
                index[kw] = len(counts)
                counts.append(0)
            counts[index[kw]] += 1
    if not counts:
        raise EmptyHistogramError("no keywords extracted from teacher outputs")
    labels = tuple(str(k) for k in index)
    return VoteHistogram(CandidateDomain(len(counts), labels), np.asarray(counts))


@dataclass
class StudentPrompt:
    shots: list[tuple[Any, Any]]
    provenance: list[int]
    ledger: PrivacyLedger = field(default_factory=PrivacyLedger, repr=False)

    @property
    def spent(self) -> Spent:
        return self.ledger.basic_total()


def pate_label(
    ensemble: TeacherEnsemble,
    query: Any,
    sigma: float,
    rng: RngLike,
    ledger: Optional[PrivacyLedger] = None,
) -> int:
    """Noisy-argmax label for one query.  Charges Gaussian RDP with unit
    sensitivity to ``ledger`` when given."""
    if ensemble.domain is None:
        raise InvalidInputError("classification ensemble needs a candidate domain")
    votes = ensemble.answers(query)
    for t, v in enumerate(votes):
        if not (isinstance(v, (int, np.integer)) and 0 <= v < ensemble.domain.size):
            raise ProtocolError(f"teacher {t} answered {v!r}, outside the domain", t)
    hist = VoteHistogram.from_votes(votes, ensemble.domain)
    label = gnmax(hist, sigma, rng)
    if ledger is not None:
        ledger.charge_rdp("gnmax", rdp_gaussian(sigma), sigma=sigma)
    return label


def greedy_select(candidates: Sequence, n: int, scorer: Callable[[list], float]) -> list[int]:
    """Greedy forward selection; ties go to the lowest candidate index."""
    chosen: list[int] = []
    remaining = list(range(len(candidates)))
    for _ in range(n):
        best_i, best_score = None, -math.inf
        for i in remaining:
            score = scorer([candidates[j] for j in chosen + [i]])
            if best_i is None or score > best_score:
                best_i, best_score = i, score
        chosen.append(best_i)
        remaining.remove(best_i)
    return chosen


def promptpate_build_student(
    ensemble: TeacherEnsemble,
    public_inputs: Sequence,
    sigma: float,
    n_shots: int,
    shot_scorer: Callable[[list], float],
    rng: RngLike,
) -> StudentPrompt:
    """Label every public input with the ensemble, then keep the ``n_shots``
    labelled pairs chosen greedily by ``shot_scorer``.  The scorer sees only
    privately labelled public data, so selection costs no extra budget."""
    if not public_inputs:
        raise InvalidInputError("public input set is empty")
    if not 0 <= n_shots <= len(public_inputs):
        raise InvalidInputError("n_shots must not exceed the number of public inputs")
    ledger = PrivacyLedger()
    labelled = [
        (x, pate_label(ensemble, x, sigma, _sub(rng, i), ledger)) for i, x in enumerate(public_inputs)
    ]
    picked = greedy_select(labelled, n_shots, shot_scorer)
    return StudentPrompt([labelled[i] for i in picked], picked, ledger)


def ksa_select(
    teacher_texts: Sequence,
    extraction: KeywordExtraction,
    k: int,
    budget: PrivacyBudget,
    method: str,
    rng: RngLike,
    ledger: Optional[PrivacyLedger] = None,
) -> Optional[list[str]]:
    """Privately release the top-k keywords across teacher outputs.

    ``method="ptr"`` releases the exact top-k or None (abstain) at
    ``(budget.epsilon, budget.delta)``; when fewer than k+1 keywords exist the
    missing ranks count as zero.  ``method="gumbel_topk"`` peels k keywords at
    ``budget.epsilon / k`` each (fewer if fewer keywords exist).  Each keyword
    count has sensitivity 1 since teachers vote by presence.
    """
    if k < 1:
        raise InvalidInputError("k must be positive")
    hist = keyword_histogram(teacher_texts, extraction)
    labels = hist.domain.labels
    if method == "ptr":
        counts = hist.counts
        if counts.size <= k:
            counts = np.concatenate([counts, np.zeros(k + 1 - counts.size, dtype=np.int64)])
        picked = ptr_topk(counts, k, budget, rng)
        if ledger is not None:
            ledger.charge("ptr_topk", budget.epsilon, budget.delta, k=k)
        if picked is None:
            return None
        return [labels[i] for i in picked if i < len(labels)]
    if method == "gumbel_topk":
        kk = min(k, hist.domain.size)
        picked = gumbel_topk(hist.counts.astype(float), 1.0, budget.epsilon / k, kk, rng)
        if ledger is not None:
            ledger.charge("gumbel_topk", budget.epsilon, 0.0, k=k)
        return [labels[i] for i in picked]
    raise InvalidInputError(f"unknown KSA method {method!r}")


def fewshotgen_next_token(
    per_subset_candidates: Sequence[int],
    epsilon_token: float,
    rng: RngLike,
    *,
    vocab_size: Optional[int] = None,
    ledger: Optional[PrivacyLedger] = None,
) -> int:
    """Private next-token choice from one proposal per disjoint subset.

    The candidate domain is ``range(vocab_size)`` when given, otherwise the
    distinct proposed tokens in ascending order.
    """
    if len(per_subset_candidates) == 0:
        raise InvalidInputError("need at least one subset proposal")
    proposals = np.asarray(per_subset_candidates, dtype=np.int64)
    if vocab_size is None:
        tokens, counts = np.unique(proposals, return_counts=True)
    else:
        if proposals.min() < 0 or proposals.max() >= vocab_size:
            raise InvalidInputError("proposed token outside the vocabulary")
        tokens = np.arange(vocab_size)
        counts = np.bincount(proposals, minlength=vocab_size)
    pick = gumbel_topk(counts.astype(float), 1.0, epsilon_token, 1, rng)[0]
    if ledger is not None:
        ledger.charge("gumbel_top1", epsilon_token, 0.0)
    return int(tokens[pick])


@dataclass(frozen=True)
class GenerationBudget:
    total: PrivacyBudget
    per_token_epsilon: float
    t_max: int

    def __post_init__(self) -> None:
        if not self.per_token_epsilon > 0:
            raise InvalidInputError("per-token epsilon must be positive")
        if self.t_max < 0:
            raise InvalidInputError("t_max must be nonnegative")
        if self.per_token_epsilon * self.t_max > self.total.epsilon * (1 + 1e-12):
            raise InvalidInputError(
                f"{self.t_max} tokens at {self.per_token_epsilon} exceed total epsilon {self.total.epsilon}"
            )

    @classmethod
    def per_token(cls, epsilon: float, t_max: int) -> "GenerationBudget":
        return cls(PrivacyBudget(max(epsilon * t_max, epsilon)), epsilon, t_max)


@dataclass
class GenerationResult:
    tokens: list[int]
    ledger: PrivacyLedger = field(repr=False)

    @property
    def spent(self) -> Spent:
        return self.ledger.basic_total()


def fewshotgen_generate(
    ensemble: TokenEnsemble,
    budget: GenerationBudget,
    stop_token: Optional[int],
    rng: RngLike,
    *,
    vocab_size: Optional[int] = None,
) -> GenerationResult:
    """Generate up to ``t_max`` tokens, one private vote per token.

    Every teacher sees the same released prefix.  A selected stop token is
    emitted (and charged) and ends generation.
    """
    ledger = PrivacyLedger()
    tokens: list[int] = []
    for step in range(budget.t_max):
        prefix = tuple(tokens)
        proposals = []
        for t in range(ensemble.n_teachers):
            try:
                proposals.append(int(ensemble.next_token(prefix, t)))
            except Exception as exc:  # noqa: BLE001
                raise ProtocolError(f"teacher {t} failed at step {step}: {exc}", t) from exc
        tok = fewshotgen_next_token(
            proposals, budget.per_token_epsilon, _sub(rng, step), vocab_size=vocab_size, ledger=ledger
        )
        tokens.append(tok)
        if stop_token is not None and tok == stop_token:
            break
    return GenerationResult(tokens, ledger)


def promptpategen_build_student(
    ensemble: TeacherEnsemble,
    public_inputs: Sequence,
    extraction: KeywordExtraction,
    k: int,
    per_query_budget: PrivacyBudget,
    n_shots: int,
    rng: RngLike,
    *,
    method: str = "ptr",
) -> StudentPrompt:
    """Private keyword "labels" for public inputs, assembled into a student prompt.

    Inputs are processed in order until ``n_shots`` non-abstaining labels are
    collected.  Every processed input is charged ``per_query_budget``, including
    those that abstain.
    """
    if n_shots < 0 or n_shots > len(public_inputs):
        raise InvalidInputError("n_shots must be between 0 and the number of public inputs")
    ledger = PrivacyLedger()
    shots: list[tuple[Any, str]] = []
    provenance: list[int] = []
    if n_shots == 0:
        return StudentPrompt(shots, provenance, ledger)
    for i, x in enumerate(public_inputs):
        texts = ensemble.answers(x)
        keywords = ksa_select(texts, extraction, k, per_query_budget, method, _sub(rng, i), ledger)
        if keywords is not None:
            shots.append((x, " ".join(keywords)))
            provenance.append(i)
            if len(shots) == n_shots:
                break
    if not shots:
        raise StudentConstructionError("every public query abstained")
    return StudentPrompt(shots, provenance, ledger)


def reference_hyperparameters() -> dict:
    """Reference per-dataset settings (noise scales, ensemble sizes), kept as
    data for comparison.  The noise scales are not derived by the accountant."""
    text = resources.files("privadapt.data").joinpath("reference_hyperparameters.json").read_text(encoding="utf-8")
    return json.loads(text)


def fewshotgen_reference_sigma(dataset: str) -> dict[float, float]:
    table = reference_hyperparameters()["fewshotgen_sigma"]
    if dataset not in table or dataset == "epsilons":
        raise InvalidInputError(f"no reference noise scales for {dataset!r}")
    return dict(zip(table["epsilons"], table[dataset]))
