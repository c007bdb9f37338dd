"""Scene-aware human mesh recovery at desk scale.

Stage 1 locates the body root by voxel offset voting in the scene point
cloud and labels scene contacts; stage 2 regresses a body mesh with
cross-attention to those contacts. A synthetic generator supplies ground
truth for every intermediate quantity.
"""
from .body import BodyModel, ContactLabels, build_toy_body, gt_contact_labels, regress_joints
from .config import VARIANTS, RunConfig
from .errors import (ConfigError, Diverged, MissingCheckpoint, MissingInputError, NumericalError,
                     SahmrError)
from .geometry import Camera, Root3D, lift_root, project
from .scene import SceneModel, SparseVoxelGrid, signed_distance, voxelize

__version__ = "0.1.0"

__all__ = [
    "BodyModel", "ContactLabels", "build_toy_body", "gt_contact_labels", "regress_joints",
    "VARIANTS", "RunConfig", "ConfigError", "Diverged", "MissingCheckpoint", "MissingInputError",
    "NumericalError", "SahmrError", "Camera", "Root3D", "lift_root", "project", "SceneModel",
    "SparseVoxelGrid", "signed_distance", "voxelize",
]
