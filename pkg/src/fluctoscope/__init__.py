"""Super-resolved reconstruction of blinking-fluorophore image stacks.

Two-step pipeline: sparse support estimation in the covariance domain,
then constrained intensity and background estimation on the recovered
support, with automatic selection of both regularization parameters.
Includes a synthetic acquisition simulator and an evaluation harness.
"""

from ._kernels import BACKEND as kernel_backend

__version__ = "0.1.0"

__all__ = ["kernel_backend", "__version__"]
