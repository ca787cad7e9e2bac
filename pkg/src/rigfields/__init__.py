"""rigfields: skeleton/skin vector-field rigging toolkit.

Encode skeletons as confidence-decaying vector fields on sparse voxel grids
and decode them back through weighted mean-shift clustering; factorize skin
weights into joint-count-agnostic embeddings; transfer skins through a
BVH-accelerated nearest-surface query; animate through FK/LBS with stochastic
pose jitter; and evaluate rigs with Chamfer, Wasserstein, and
Gromov-Wasserstein metrics after multi-restart ICP alignment.
"""

from .core import (
    Mesh,
    Rig,
    Skeleton,
    SkinWeights,
    SparseVoxelGrid,
    load_rig,
    normalize_rig,
    save_rig,
)
from .errors import NumericError, ParseError, RigError, ValidationError

__all__ = [
    "Mesh",
    "Rig",
    "Skeleton",
    "SkinWeights",
    "SparseVoxelGrid",
    "load_rig",
    "save_rig",
    "normalize_rig",
    "RigError",
    "ParseError",
    "ValidationError",
    "NumericError",
]

__version__ = "0.1.0"
