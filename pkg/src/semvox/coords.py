"""World <-> voxel index conversions.

Voxel (i, j, k) covers the half-open box [i*h, (i+1)*h) x ... for voxel size
h, so a point exactly on a face belongs to the voxel on the positive side.
Indices are usable within +/-2**30 along each axis; conversions outside that
range raise instead of saturating.
"""

from __future__ import annotations

import numpy as np
from numpy.typing import NDArray

from .errors import ConfigError, OutOfRangeError

COORD_LIMIT = 1 << 30


def world_to_voxel(points: NDArray, voxel_size: float) -> NDArray[np.int64]:
    """Map world points (..., 3) to integer voxel indices.

    floor semantics: (0.25, -0.05, 0.31) at size 0.1 -> (2, -1, 3), and
    -0.0001 maps to index -1, not 0.
    """
    if voxel_size <= 0:
        raise ConfigError(f"voxel_size must be positive, got {voxel_size}")
    pts = np.asarray(points, dtype=np.float64)
    idx = np.floor(pts / voxel_size).astype(np.int64)
    if idx.size and np.abs(idx).max() >= COORD_LIMIT:
        raise OutOfRangeError(
            f"voxel index beyond +/-2^30 addressable range (voxel_size={voxel_size})"
        )
    return idx


def voxel_center(indices: NDArray, voxel_size: float) -> NDArray[np.float64]:
    """Center point of each voxel index triple."""
    return (np.asarray(indices, dtype=np.float64) + 0.5) * voxel_size


def voxel_corner(indices: NDArray, voxel_size: float) -> NDArray[np.float64]:
    """Minimal (lower) corner of each voxel."""
    return np.asarray(indices, dtype=np.float64) * voxel_size


def check_coords(coords: NDArray) -> NDArray[np.int64]:
    """Validate integer voxel coords against the addressable range."""
    c = np.ascontiguousarray(coords, dtype=np.int64)
    if c.size and np.abs(c).max() >= COORD_LIMIT:
        raise OutOfRangeError("voxel coordinate beyond +/-2^30 addressable range")
    return c
