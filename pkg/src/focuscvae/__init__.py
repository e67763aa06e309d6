"""Focus-constrained CVAE response generator on a self-contained autodiff engine."""

__version__ = "0.1.0"

from .autodiff import Tensor, Tape, grad_check

__all__ = ["Tensor", "Tape", "grad_check", "__version__"]
