"""Hybrid Mamba/attention multimodal model with a progressive training chain, cost model and benchmarks."""

__version__ = "0.1.0"
