"""Quantum-cloud task placement testbed."""

__version__ = "0.1.0"
