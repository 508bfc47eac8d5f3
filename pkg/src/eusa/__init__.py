"""Universal shuffle attack lab against a toy differentiable Siamese tracker."""

__version__ = "0.1.0"
