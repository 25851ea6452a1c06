"""LocalDrop: low-rank and keep-rate regularization derived from a local Rademacher bound."""
from ._backend import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
