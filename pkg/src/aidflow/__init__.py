"""Toy rectified-flow MMDiT with learned per-block text modulation."""

__version__ = "0.1.0"
