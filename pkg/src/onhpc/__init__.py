"""Optic-nerve-head point-cloud phenotyping toolkit."""

__version__ = "0.1.0"

from .pointcloud import ClassLabel, LayerLabel, PointCloud  # noqa: F401
