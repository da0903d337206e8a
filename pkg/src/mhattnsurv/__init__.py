"""Multi-head attention survival models over patch-embedding bags.

Submodules are imported explicitly (``from mhattnsurv import model``,
``train``, ``evaluate``, ...); this package root stays import-light so the
command-line entry point can pin BLAS thread environment variables before
numpy loads.
"""

__version__ = "0.1.0"
