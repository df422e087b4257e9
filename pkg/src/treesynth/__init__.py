"""Concept-tree driven synthetic data pipeline."""

__version__ = "0.1.0"
