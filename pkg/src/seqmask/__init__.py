"""Sequential multimodal classification with learnable sparse feature masks."""

from .tensor import Tensor, concat, cross_entropy, l2norm, no_grad

__all__ = ["Tensor", "concat", "cross_entropy", "l2norm", "no_grad"]
__version__ = "0.1.0"
