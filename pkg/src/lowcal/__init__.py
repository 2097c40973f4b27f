"""Targetless LiDAR-camera extrinsic calibration at desk scale."""

__version__ = "0.1.0"
