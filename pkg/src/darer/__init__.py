"""Dual-task dialog understanding with recurrent relational temporal graph reasoning."""

from darer.tensor import Tensor, backward, grad_check, no_grad

__all__ = ["Tensor", "backward", "grad_check", "no_grad"]
__version__ = "0.1.0"
