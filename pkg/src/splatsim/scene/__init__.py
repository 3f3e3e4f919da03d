"""Scene domain types, validation, and persistence."""

from .types import (EGO_ID, BoundingBox3D, CameraModel, FrameBuffer,
                    FrameSequence, GaussianField, GaussianPrimitive,
                    InstanceMaskSequence, Pose, RigidAsset, Scene,
                    TriangleMesh, Trajectory, Violation,
                    sh_degree_for_coeff_count)
from .validate import ALL_CODES, validate_frames, validate_scene
from .io import load_scene, save_scene, scene_bytes
from .ply import import_splats_ply
from .frames import export_png, load_frames, save_frames

__all__ = [
    "EGO_ID", "BoundingBox3D", "CameraModel", "FrameBuffer", "FrameSequence",
    "GaussianField", "GaussianPrimitive", "InstanceMaskSequence", "Pose",
    "RigidAsset", "Scene", "TriangleMesh", "Trajectory", "Violation",
    "sh_degree_for_coeff_count", "ALL_CODES", "validate_frames",
    "validate_scene", "load_scene", "save_scene", "scene_bytes",
    "import_splats_ply", "export_png", "load_frames", "save_frames",
]
