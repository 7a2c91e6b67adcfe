"""Dyadic harmonic analysis on finite atomic measures."""
__version__ = "0.1.0"
