"""evomoe: evolutionary expert pruning and merging for toy sparse-MoE transformers."""

__version__ = "0.1.0"
