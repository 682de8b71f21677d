"""Generalized maximum causal entropy inverse reinforcement learning on tabular MDPs."""

__version__ = "0.1.0"
