"""Desk-scale CNN framework for scene classification with three design modalities."""

__version__ = "0.1.0"
