"""Stochastic normalizing flows built from pairs of forward/reverse Markov chains."""
__version__ = "0.1.0"
