"""Phase-anchored distillation of a noisy scripted teacher into a compact discretized-action student."""

__version__ = "0.1.0"
