"""Editable Gaussian-splat driving scenes.

Scene model and IO, trajectory edits, a differentiable splat renderer,
background refitting for paired-data synthesis, mesh-to-box alignment, a
small conditional diffusion stack, and the evaluation metrics + benchmark
runner that tie them together.  The ``splatsim`` CLI exposes the pipeline
as composable subcommands.
"""

__version__ = "0.1.0"

from .scene.types import (EGO_ID, BoundingBox3D, CameraModel, FrameBuffer,
                          FrameSequence, GaussianField, GaussianPrimitive,
                          InstanceMaskSequence, Pose, RigidAsset, Scene,
                          Trajectory, TriangleMesh)
from .scene.io import load_scene, save_scene
from .scene.validate import validate_scene
from .errors import SplatSimError

__all__ = [
    "EGO_ID", "BoundingBox3D", "CameraModel", "FrameBuffer", "FrameSequence",
    "GaussianField", "GaussianPrimitive", "InstanceMaskSequence", "Pose",
    "RigidAsset", "Scene", "Trajectory", "TriangleMesh",
    "load_scene", "save_scene", "validate_scene", "SplatSimError",
    "__version__",
]
