"""Frequency-aware face-forgery detection toolkit."""

__version__ = "0.1.0"
