"""ABC-SMC parameter inference for ODE/DDE models.

Four sampler variants: two that numerically integrate the model equations
inside the ABC loop, and two fast variants that replace integration with a
Gaussian-process gradient-matching distance.
"""

__version__ = "0.1.0"

from .kernels import MLP, SE, KernelSpec, gram, kernel_deriv_first, kernel_deriv_mixed, kernel_eval

__all__ = [
    "SE",
    "MLP",
    "KernelSpec",
    "kernel_eval",
    "kernel_deriv_first",
    "kernel_deriv_mixed",
    "gram",
    "__version__",
]
