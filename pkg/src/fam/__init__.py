"""Fact-based agent modeling for multi-agent particle worlds."""

__version__ = "0.1.0"
