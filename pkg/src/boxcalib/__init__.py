"""Markerless extrinsic calibration of depth cameras against a known box structure."""

from .geometry import Intrinsics, PointCloud, RigidPose, VertexMap, deproject, pose_error
from .procrustes import kabsch, loss_3d, soft_correspondences
from .structure import StructureModel, default_structure, load_structure, render

__version__ = "0.1.0"

__all__ = [
    "Intrinsics", "PointCloud", "RigidPose", "VertexMap", "StructureModel",
    "deproject", "pose_error", "kabsch", "loss_3d", "soft_correspondences",
    "default_structure", "load_structure", "render",
]
