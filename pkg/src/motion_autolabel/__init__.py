"""Unsupervised scene flow and motion-based auto labeling for LiDAR sequences."""

__version__ = "0.1.0"
