"""Nash Q-Network: equilibrium-aligned training for two-player zero-sum Markov games."""

__version__ = "0.1.0"
