"""Dual-branch vision/language decision model with top-k MIL pooling and VLM-guided refinement."""

__version__ = "0.1.0"
