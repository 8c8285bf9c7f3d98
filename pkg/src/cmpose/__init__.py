"""Causal-inspired multitask video pose estimation on synthetic keypoint clips."""

__version__ = "0.1.0"
