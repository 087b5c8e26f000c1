"""Shot scale and camera-movement classification with subject-map guidance."""

__version__ = "0.1.0"
