"""Gauge-invariant magnetic phase-space quantization."""

__version__ = "0.1.0"
