"""Toolkit for fitting history-dependent conditional intensities to event streams."""

__version__ = "0.1.0"
