"""Adaptive multi-timescale scheduling for a simulated multi-edge cluster."""

__version__ = "0.1.0"
