"""Perturbation-regularized training, attacks and evaluation for small MLPs."""

from ._core import KERNEL_NAME
from .graph import Graph, grad_check

__version__ = "0.1.0"

__all__ = ["Graph", "grad_check", "KERNEL_NAME", "__version__"]
