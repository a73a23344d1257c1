"""Synthetic event-camera slip data: simulation, labeling, and classifiers."""

__version__ = "0.1.0"
