"""Necessity/sufficiency Shapley saliency maps for chain CNNs."""

__version__ = "0.1.0"
