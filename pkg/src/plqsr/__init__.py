"""Outlier-aware post-training quantization for super-resolution CNNs."""

__version__ = "0.1.0"
