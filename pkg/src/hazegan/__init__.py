"""Unpaired single-image dehazing with global-local cycle-consistent GANs."""

__version__ = "0.1.0"
