"""Planetary image archive tagging: salient landmark extraction, calibrated
classification heads, confidence-threshold abstention, and a class-searchable
archive index."""

__version__ = "0.1.0"
