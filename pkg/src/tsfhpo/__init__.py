"""Hyperparameter optimization for desk-scale time-series forecasters."""

__version__ = "0.1.0"
