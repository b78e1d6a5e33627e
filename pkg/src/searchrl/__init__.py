"""Desk-scale retrieval-augmented RL with knowledge internalization."""

__version__ = "0.1.0"
