"""Codified foreshadow-payoff generation, mining and evaluation."""

__version__ = "0.1.0"
