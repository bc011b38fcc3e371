"""Simulated-teacher trade-off curves and exact mechanism oracles."""

from privadapt.simharness.oracles import (
    MechanismSpec,
    dp_ratio_audit,
    exact_log_distribution,
    exact_mechanism_distribution,
    majority_vote_accuracy,
    neighbours,
)
from privadapt.simharness.scenario import (
    CSV_COLUMNS,
    DEFAULT_GRID,
    ScenarioConfig,
    ScenarioError,
    SimTeacherModel,
    TradeoffCurve,
    TradeoffPoint,
    sample_votes,
    simulate,
    simulate_classification,
    simulate_generation,
)

__all__ = [
    "CSV_COLUMNS",
    "DEFAULT_GRID",
    "MechanismSpec",
    "ScenarioConfig",
    "ScenarioError",
    "SimTeacherModel",
    "TradeoffCurve",
    "TradeoffPoint",
    "dp_ratio_audit",
    "neighbours",
    "exact_log_distribution",
    "exact_mechanism_distribution",
    "majority_vote_accuracy",
    "sample_votes",
    "simulate",
    "simulate_classification",
    "simulate_generation",
]
