"""Spatial mixture-of-experts layers trained with a routing-classification loss."""

__version__ = "0.1.0"
