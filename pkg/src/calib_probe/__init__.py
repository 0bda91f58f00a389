"""Probing learned LiDAR-camera extrinsic calibrators on synthetic scenes."""

__version__ = "0.1.0"
