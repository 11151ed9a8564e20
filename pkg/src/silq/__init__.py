"""Quantization-aware training with distillation for small decoder-only transformers."""

__version__ = "0.1.0"
