"""Differentially private aggregation, accounting and cost estimation for LLM adaptation experiments."""

__version__ = "0.1.0"
