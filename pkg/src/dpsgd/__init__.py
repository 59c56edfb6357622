"""Differentially private SGD with Renyi accounting, training and empirical auditing."""

__version__ = "0.1.0"
