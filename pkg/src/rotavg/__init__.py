"""Robust multiple rotation averaging on camera view-graphs."""

__version__ = "0.1.0"
