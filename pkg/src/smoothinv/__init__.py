"""Backdoor inversion from a single image through randomized smoothing."""

__version__ = "0.1.0"
