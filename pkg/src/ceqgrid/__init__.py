"""Microgrid energy trading with correlated-equilibrium Q-learning agents."""

__version__ = "0.1.0"
