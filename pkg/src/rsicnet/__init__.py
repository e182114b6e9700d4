"""Tri-axis multi-head attention for small-image scene classification, on a numpy autodiff tape.

Importing the package itself is cheap; submodules pull in numpy. The CLI
relies on this to fix BLAS thread counts before numpy loads.
"""

__version__ = "0.1.0"
