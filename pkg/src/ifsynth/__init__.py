"""Instruction-following training-data synthesis pipeline."""

__version__ = "0.1.0"
