"""Desk-scale decoder-only transformer inference with clustered head attention."""

__version__ = "0.1.0"
