"""Unit-to-unit speech translation: discrete acoustic units in, discrete units out."""

from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
