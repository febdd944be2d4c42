"""Gradient-alignment regularizers and attribution-robustness measurements on a numpy autodiff core."""

__version__ = "0.1.0"
