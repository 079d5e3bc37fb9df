"""Distance-metric-learning losses and a small text classifier trained with them."""

__version__ = "0.1.0"
