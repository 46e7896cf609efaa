"""Exploration harness for order-preserving prefixes of compiler optimization levels."""

__version__ = "0.1.0"
