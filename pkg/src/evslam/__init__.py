"""Monocular event-camera SLAM: hybrid feature/direct tracking and
event-based dense mapping, with a built-in synthetic rig for verification."""

__version__ = "0.1.0"
