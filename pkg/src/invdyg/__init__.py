"""Invariant dynamic-graph forecasting of daily lab values under distribution shift."""

__version__ = "0.1.0"
