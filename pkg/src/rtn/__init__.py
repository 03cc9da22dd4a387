"""Reinforced transformer network for vessel-level image quality assessment."""

__version__ = "0.1.0"
