"""Dual-encoder EEG classifier with prototype and reciprocal-point heads, on a small numpy autodiff core."""

from .errors import PosrError

__version__ = "0.1.0"

__all__ = ["PosrError", "__version__"]
