"""Stochastic optimal energy procurement for green base stations with probabilistic QoS."""

__version__ = "0.1.0"
