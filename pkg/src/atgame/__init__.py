"""Adversarial training as a two-player minimax game, with rebalancing
methods and the diagnostics used to detect and explain robust overfitting."""

__version__ = "0.1.0"
