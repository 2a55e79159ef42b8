"""Self-supervised encoders with a geodesic trajectory regularizer, trained and probed on synthetic shapes."""

__version__ = "0.1.0"
