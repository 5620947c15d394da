"""Orbit-chart solver and verification toolkit for elliptic free-boundary problems."""

__version__ = "0.1.0"
