"""Electrification mapping from high-resolution daytime satellite tiles."""

__version__ = "0.1.0"
