"""Calibrated energy-based adversarial training on tabular and 2D problems."""

__version__ = "0.1.0"
