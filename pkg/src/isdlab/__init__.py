"""Semi-supervised object detection with interpolation-based consistency losses."""

__version__ = "0.1.0"
