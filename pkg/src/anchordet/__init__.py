"""Lidar-anchored long-range 3D detection in the range view, at toy scale."""

__version__ = "0.1.0"
