"""Synthetic task, labels and the statistical experiments."""
