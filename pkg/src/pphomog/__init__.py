"""Two-scale homogenization solver suite for pseudo-parabolic systems with drift.

Subpackages by concern: coefficients (problem data), discretization (grids
and sparse operators), micro (fine-scale solver), cell (periodic correctors
and effective tensors), macro (upscaled solver with memory term),
verification (certificates and order studies), cli (run harness).
"""

__version__ = "0.1.0"

from . import coefficients, discretization, micro, cell, macro, verification  # noqa: F401
