"""Desk-scale LiDAR semantic segmentation with superclass feature binding and
beam-wise feature distillation."""

__version__ = "0.1.0"
