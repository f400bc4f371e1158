"""Numerical toolkit for the weighted geodesic X-ray transform on convex foliations."""

__version__ = "0.1.0"
