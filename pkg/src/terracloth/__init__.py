"""terracloth: bare-earth terrain recovery from airborne LiDAR point clouds.

The processing chain: merge scans, remove statistical outliers, separate
ground from vegetation with a simulated cloth, then derive terrain products
(DTM rasters, meshes, cross-section profiles, classification reports).
"""

from .core import Aabb, Label, NeighborIndex, PointCloud, bounding_box

__version__ = "0.1.0"

__all__ = [
    "Aabb",
    "Label",
    "NeighborIndex",
    "PointCloud",
    "bounding_box",
    "__version__",
]
