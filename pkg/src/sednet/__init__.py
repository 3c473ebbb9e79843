"""Shallow encoder-decoder brain tumor segmentation, trained with a small numpy autodiff engine."""

__version__ = "0.1.0"
