"""Semantic scene completion toolkit for cooperative LiDAR data."""

__version__ = "0.1.0"
