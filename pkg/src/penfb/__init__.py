"""Penalty-regulated stochastic forward-backward splitting."""

__version__ = "0.1.0"
