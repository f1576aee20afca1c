"""Symbolic forecasting: equation-learner networks and evolutionary symbolic trees
for chaotic and real-world time series."""

__version__ = "0.1.0"
