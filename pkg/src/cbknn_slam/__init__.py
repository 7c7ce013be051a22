"""Gaussian-splatting RGB-D SLAM with transient CB-KNN smoothing on keyframes."""

__version__ = "0.1.0"
