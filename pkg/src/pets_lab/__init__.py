"""Desk-scale laboratory for periodically exchanged teacher-student self-training."""

__version__ = "0.1.0"
