"""Deterministic commons-harvest simulation with language-model driven agents."""

__version__ = "0.1.0"
