"""Bayesian-optimization tuner for parameter-server SGD schedules on heterogeneous clusters."""

__version__ = "0.1.0"
