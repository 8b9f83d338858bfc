"""Hierarchical physics-informed graph model for surface currents on PEC targets,
with a collocation EFIE oracle, training/evaluation protocols and a CLI."""
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
