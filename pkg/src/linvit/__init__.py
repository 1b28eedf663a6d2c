"""Desk-scale lab for converting softmax vision transformers to linear attention."""

__version__ = "0.1.0"
