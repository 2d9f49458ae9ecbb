"""Grounding-signal toolkit: box/mask textualization, geometry, datasets and metrics."""

__version__ = "0.1.0"
