"""Label-enhanced graph neural networks with adaptive self-training."""

__version__ = "0.1.0"
