"""Perception-to-cut pipeline for truss-tomato harvesting robots."""

__version__ = "0.1.0"
