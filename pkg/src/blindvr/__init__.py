"""Blind recovery of bitstream-corrupted video."""

__version__ = "0.1.0"
