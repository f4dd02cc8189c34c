"""Model-augmented actor-critic on small continuous-control problems."""

from ._jit import NUMBA_ENABLED

__version__ = "0.1.0"
__all__ = ["NUMBA_ENABLED", "__version__"]
