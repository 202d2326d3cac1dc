"""Protein inference with a tripartite graph neural network trained by
pseudo-label self-training."""

__version__ = "0.1.0"
