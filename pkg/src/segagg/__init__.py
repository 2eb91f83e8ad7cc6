"""Segment-aggregation speaker verification on a from-scratch numpy autodiff engine."""

__version__ = "0.1.0"
