"""Dual-attention residual networks for sensor-based activity recognition."""

__version__ = "0.1.0"
