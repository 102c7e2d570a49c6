"""Siamese representation learning with mixed hard views, on a numpy autodiff core."""

__version__ = "0.1.0"
