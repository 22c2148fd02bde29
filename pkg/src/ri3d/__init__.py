"""Perspective range-image 3D object detection with point-set aggregation kernels."""

__version__ = "0.1.0"
