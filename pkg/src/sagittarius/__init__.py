"""Behavior-aware bipartite graph convolution recommender."""

__version__ = "0.1.0"
