"""Desk-scale camera pose regression, pose auto-encoding, and refinement."""

__version__ = "0.1.0"
