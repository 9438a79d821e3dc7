"""Chunked test-time-training sequence memory with elastic consolidation."""

__version__ = "0.1.0"

from .tape import Tensor, no_grad, reverse_gradients, finite_diff_oracle

__all__ = ["Tensor", "no_grad", "reverse_gradients", "finite_diff_oracle"]
