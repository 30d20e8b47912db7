"""Weak-constraint 4D-Var model-error covariance laboratory."""

__version__ = "0.1.0"
