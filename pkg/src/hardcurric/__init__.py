"""Hardness-aware dynamic curriculum learning for multimodal recognition with missing modalities."""

__version__ = "0.1.0"
