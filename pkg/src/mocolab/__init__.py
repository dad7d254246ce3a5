"""Momentum contrast and rival contrastive mechanisms on a minimal autodiff core."""

__version__ = "0.1.0"
