"""Few-shot class-incremental learning lab: compact transformer backbone,
stochastic cosine classifier, per-session attention prefixes with Gaussian
task routing, prototype rectification, and a protocol harness.

Built on a small numpy autodiff kernel (`fscil.numerics`) so every gradient
path is finite-difference checkable.
"""

from .numerics import SeededRng, Tensor, grad_check, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "SeededRng", "grad_check", "no_grad", "__version__"]
