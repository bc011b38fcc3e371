"""API-token and GPU-hour cost estimates for private adaptation methods.

Prices are dollars per 1M tokens (models) or per hour (hardware).  A query
with ``n_shots`` demonstrations sends the instruction, the query input and
``n_shots`` (input + output) pairs; every ensemble member sends the full
prompt.  Arithmetic is full precision; rounding to cents happens only in
``CostReport.to_dict``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Union

from privadapt.mechanisms import InvalidInputError

TOKENS_PER_PRICE_UNIT = 1_000_000


class CostLookupError(KeyError):
    """Unknown model, hardware or dataset name."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


@dataclass(frozen=True)
class ModelPrice:
    input_price: float
    output_price: float

    def __post_init__(self) -> None:
        if self.input_price < 0 or self.output_price < 0:
            raise InvalidInputError("prices must be nonnegative")


@dataclass(frozen=True)
class PricingTable:
    models: dict[str, ModelPrice] = field(default_factory=dict)
    hardware: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if any(rate < 0 for rate in self.hardware.values()):
            raise InvalidInputError("hourly rates must be nonnegative")

    def model(self, name: str) -> ModelPrice:
        try:
            return self.models[name]
        except KeyError:
            raise CostLookupError(f"unknown model {name!r}; known: {sorted(self.models)}") from None

    def hourly_rate(self, name: str) -> float:
        try:
            return self.hardware[name]
        except KeyError:
            raise CostLookupError(f"unknown hardware {name!r}; known: {sorted(self.hardware)}") from None

    @classmethod
    def from_dict(cls, d: dict) -> "PricingTable":
        models = {k: ModelPrice(float(v["input_price"]), float(v["output_price"])) for k, v in d.get("models", {}).items()}
        hardware = {k: float(v) for k, v in d.get("hardware", {}).items()}
        return cls(models, hardware)


@dataclass(frozen=True)
class TokenProfile:
    avg_input_tokens: float = 0.0
    avg_output_tokens: float = 0.0
    instruction_tokens: float = 0.0

    def __post_init__(self) -> None:
        if min(self.avg_input_tokens, self.avg_output_tokens, self.instruction_tokens) < 0:
            raise InvalidInputError("token counts must be nonnegative")


@dataclass(frozen=True)
class QueryWorkload:
    n_queries: int
    profile: TokenProfile
    n_shots: int = 0
    ensemble_size: int = 1

    def __post_init__(self) -> None:
        if self.n_queries < 1:
            raise InvalidInputError("n_queries must be positive")
        if self.n_shots < 0:
            raise InvalidInputError("n_shots must be nonnegative")
        if self.ensemble_size < 1:
            raise InvalidInputError("ensemble_size must be at least 1")


@dataclass(frozen=True)
class TrainWorkload:
    gpu_hours: float
    hardware: str

    def __post_init__(self) -> None:
        if self.gpu_hours < 0:
            raise InvalidInputError("gpu_hours must be nonnegative")


def _load_json(name: str) -> dict:
    return json.loads(resources.files("privadapt.data").joinpath(name).read_text(encoding="utf-8"))


def load_pricing(path: Optional[Union[str, Path]] = None) -> PricingTable:
    """Pricing from ``path``, or the shipped May-2024 table."""
    if path is None:
        return PricingTable.from_dict(_load_json("pricing.json"))
    with open(path, encoding="utf-8") as fh:
        return PricingTable.from_dict(json.load(fh))


def token_profiles() -> dict[str, TokenProfile]:
    return {k: TokenProfile(**v) for k, v in _load_json("token_profiles.json").items()}


def token_profile(dataset: str) -> TokenProfile:
    profiles = token_profiles()
    try:
        return profiles[dataset.lower()]
    except KeyError:
        raise CostLookupError(f"unknown dataset {dataset!r}; known: {sorted(profiles)}") from None


def per_query_tokens(w: QueryWorkload) -> tuple[float, float]:
    """(input, output) tokens of one prompt sent to one ensemble member."""
    p = w.profile
    tokens_in = p.instruction_tokens + p.avg_input_tokens + w.n_shots * (p.avg_input_tokens + p.avg_output_tokens)
    return tokens_in, p.avg_output_tokens


def query_cost(pricing: PricingTable, model: str, w: QueryWorkload) -> float:
    price = pricing.model(model)
    tokens_in, tokens_out = per_query_tokens(w)
    per_prompt = tokens_in * price.input_price + tokens_out * price.output_price
    return w.n_queries * w.ensemble_size * per_prompt / TOKENS_PER_PRICE_UNIT


def train_cost(pricing: PricingTable, w: TrainWorkload) -> float:
    return w.gpu_hours * pricing.hourly_rate(w.hardware)


@dataclass(frozen=True)
class MethodDescriptor:
    name: str = ""
    model: Optional[str] = None
    query: Optional[QueryWorkload] = None
    train: Optional[TrainWorkload] = None

    def __post_init__(self) -> None:
        if self.query is not None and self.model is None:
            raise InvalidInputError("a query workload needs a model")

    @classmethod
    def from_dict(cls, d: dict) -> "MethodDescriptor":
        query = None
        if d.get("query"):
            q = dict(d["query"])
            if "profile" in q:
                profile = TokenProfile(**q.pop("profile"))
                q.pop("dataset", None)
            elif "dataset" in q:
                profile = token_profile(q.pop("dataset"))
            else:
                raise InvalidInputError("query workload needs 'dataset' or 'profile'")
            query = QueryWorkload(profile=profile, **q)
        train = TrainWorkload(**d["train"]) if d.get("train") else None
        return cls(d.get("method", ""), d.get("model"), query, train)

    @classmethod
    def from_json(cls, path: Union[str, Path]) -> "MethodDescriptor":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class CostReport:
    method: str
    train: float
    query: float
    per_query: float = 0.0

    @property
    def total(self) -> float:
        return self.train + self.query

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "train_usd": round(self.train, 2),
            "query_usd": round(self.query, 2),
            "all_usd": round(self.total, 2),
            "per_query_usd": round(self.per_query, 6),
            "exact": {"train_usd": self.train, "query_usd": self.query, "all_usd": self.total},
        }


def method_cost_report(pricing: PricingTable, method: MethodDescriptor) -> CostReport:
    """Train$, Query$ and their sum for one method descriptor."""
    train = train_cost(pricing, method.train) if method.train else 0.0
    query = per_query = 0.0
    if method.query:
        query = query_cost(pricing, method.model, method.query)
        per_query = query / method.query.n_queries
    return CostReport(method.name, train, query, per_query)


def shipped_workload(name: str) -> MethodDescriptor:
    path = resources.files("privadapt.data").joinpath("workloads").joinpath(f"{name}.json")
    return MethodDescriptor.from_dict(json.loads(path.read_text(encoding="utf-8")))
