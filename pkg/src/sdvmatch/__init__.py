"""Point cloud matching with smoothed-density voxel descriptors.

Pipeline: local reference frames -> canonicalized smoothed-density voxel
grids -> fully-convolutional descriptor network -> mutual nearest-neighbor
matching -> RANSAC rigid registration -> recall-based evaluation.
"""

from .core import RigidTransform, SpatialIndex, apply_transform, invert, voxel_downsample
from .io import RunConfig
from .lrf import Lrf, estimate_lrf
from .sdv import GridConfig, canonicalize, compute_sdv, extract_patch

__version__ = "0.1.0"

__all__ = [
    "GridConfig",
    "Lrf",
    "RigidTransform",
    "RunConfig",
    "SpatialIndex",
    "apply_transform",
    "canonicalize",
    "compute_sdv",
    "estimate_lrf",
    "extract_patch",
    "invert",
    "voxel_downsample",
    "__version__",
]
