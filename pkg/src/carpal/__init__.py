"""Desk-scale parallel autonomy: prediction, utility regression, and intervention decisions."""

__version__ = "0.1.0"
