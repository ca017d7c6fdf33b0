"""Region-phrase attention for text-to-image GANs, on a numpy autodiff core."""

__version__ = "0.1.0"
