"""Boundary-operator laboratory for clipped policy-gradient surrogates."""

__version__ = "0.1.0"
