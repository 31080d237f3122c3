"""Recurrent render-and-compare 6D object pose refinement."""

__version__ = "0.1.0"
