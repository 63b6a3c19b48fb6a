"""Optimal transmission switching under wildfire outage uncertainty."""

__version__ = "0.1.0"
