"""Toy lab for in-context n-gram learning with a two-layer attention-only model."""

__version__ = "0.1.0"
