"""Graph neural networks for radio resource management in K-pair interference channels."""

__version__ = "0.1.0"
