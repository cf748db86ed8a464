"""Adaptive platooning for autonomous intersection control, with its simulator and baselines."""

__version__ = "0.1.0"
