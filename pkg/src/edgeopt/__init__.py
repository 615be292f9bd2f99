"""Structured pruning, uint8 quantization and entropy-gated early exits on a small CNN engine."""

__version__ = "0.1.0"
