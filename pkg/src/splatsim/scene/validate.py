"""Invariant checks over scenes and frame sequences.

Violations are data, not exceptions: every domain-type invariant has a
stable code here so malformed inputs can be reported field by field
instead of crashing half way through a load.
"""

from __future__ import annotations

import numpy as np

from .types import (EGO_ID, FrameSequence, GaussianField, InstanceMaskSequence,
                    Pose, Scene, TriangleMesh, Trajectory, Violation,
                    sh_degree_for_coeff_count)

QUAT_NORM_TOL = 1e-9
# Splat rotations live in float32 blobs, so their norms can drift by the
# float32 epsilon; poses are stored at full precision and keep the tight bound.
SPLAT_QUAT_NORM_TOL = 1e-5

# Every invariant listed on the domain types maps to one of these codes.
ALL_CODES = (
    "pose.rotation_norm", "pose.nonfinite",
    "trajectory.empty", "trajectory.times_not_increasing",
    "camera.focal_nonpositive", "camera.clip_planes", "camera.image_size",
    "splat.scale_nonpositive", "splat.opacity_range", "splat.sh_shape",
    "splat.nonfinite",
    "field.empty", "field.sh_degree",
    "mesh.index_range", "mesh.nonfinite", "mesh.color_count",
    "box.size_nonpositive",
    "asset.no_geometry", "asset.geometry_outside_box",
    "scene.trajectory_missing", "scene.trajectory_orphan", "scene.ego_missing",
    "scene.timeline_not_increasing", "scene.duplicate_asset_id",
    "frames.dims_mismatch", "frames.negative_depth",
    "masks.dims_mismatch",
)

# Geometry may stick out this far past the box half-extents (times extent).
GEOMETRY_FIT_FACTOR = 1.5


def _check_pose(pose: Pose, path: str, out: list[Violation]) -> None:
    if not (np.isfinite(pose.rotation).all() and np.isfinite(pose.translation).all()):
        out.append(Violation("pose.nonfinite", path, "non-finite pose component"))
        return
    norm = float(np.linalg.norm(pose.rotation))
    if abs(norm - 1.0) > QUAT_NORM_TOL:
        out.append(Violation("pose.rotation_norm", path,
                             f"quaternion norm {norm!r} differs from 1"))


def _check_trajectory(traj: Trajectory, path: str, out: list[Violation]) -> None:
    if len(traj) == 0:
        out.append(Violation("trajectory.empty", path, "no samples"))
        return
    diffs = np.diff(traj.times)
    bad = np.nonzero(diffs <= 0)[0]
    if bad.size:
        out.append(Violation("trajectory.times_not_increasing", f"{path}.times[{bad[0] + 1}]",
                             "sample times must be strictly increasing"))
    for i, p in enumerate(traj.poses):
        _check_pose(p, f"{path}.poses[{i}]", out)


def _check_field(field: GaussianField, path: str, out: list[Violation]) -> None:
    if len(field) == 0:
        if not field.allow_empty:
            out.append(Violation("field.empty", path,
                                 "field empty without empty flag"))
        return
    if sh_degree_for_coeff_count(field.sh.shape[1]) < 0:
        out.append(Violation("field.sh_degree", f"{path}.sh",
                             f"{field.sh.shape[1]} coefficients is not (L+1)^2 for L in 0..3"))
    finite = (np.isfinite(field.means).all(axis=1)
              & np.isfinite(field.scales).all(axis=1)
              & np.isfinite(field.rotations).all(axis=1)
              & np.isfinite(field.opacities)
              & np.isfinite(field.sh).all(axis=(1, 2)))
    for i in np.nonzero(~finite)[0]:
        out.append(Violation("splat.nonfinite", f"{path}[{i}]", "non-finite value"))
    for i in np.nonzero((field.scales <= 0).any(axis=1))[0]:
        out.append(Violation("splat.scale_nonpositive", f"{path}[{i}].scale",
                             "scale components must be > 0"))
    for i in np.nonzero((field.opacities < 0) | (field.opacities > 1))[0]:
        out.append(Violation("splat.opacity_range", f"{path}[{i}].opacity",
                             "opacity outside [0, 1]"))
    norms = np.linalg.norm(field.rotations, axis=1)
    with np.errstate(invalid="ignore"):
        bad_norm = np.abs(norms - 1.0) > SPLAT_QUAT_NORM_TOL
    for i in np.nonzero(bad_norm & np.isfinite(norms))[0]:
        out.append(Violation("pose.rotation_norm", f"{path}[{i}].rotation",
                             "splat quaternion not unit norm"))


def _check_sh_shape(field: GaussianField, declared_degree: int, path: str,
                    out: list[Violation]) -> None:
    expected = (declared_degree + 1) ** 2
    if field.sh.shape[1] != expected:
        out.append(Violation("splat.sh_shape", f"{path}.sh",
                             f"{field.sh.shape[1]} coefficients, declared degree "
                             f"{declared_degree} needs {expected}"))


def _check_mesh(mesh: TriangleMesh, path: str, out: list[Violation]) -> None:
    if not np.isfinite(mesh.vertices).all():
        out.append(Violation("mesh.nonfinite", f"{path}.vertices", "non-finite vertex"))
    nv = mesh.vertices.shape[0]
    if mesh.triangles.size and (mesh.triangles.min() < 0 or mesh.triangles.max() >= nv):
        out.append(Violation("mesh.index_range", f"{path}.triangles",
                             f"vertex index outside [0, {nv})"))
    if mesh.vertex_colors.shape[0] != nv:
        out.append(Violation("mesh.color_count", f"{path}.vertex_colors",
                             f"{mesh.vertex_colors.shape[0]} colors for {nv} vertices"))


def _geometry_fits_box(points: np.ndarray, asset, path: str,
                       out: list[Violation]) -> None:
    if points.size == 0:
        return
    from .. import geometry
    box = asset.box
    inv = geometry.inverse(box.center_pose)
    local = geometry.transform_points(inv, points)
    limit = GEOMETRY_FIT_FACTOR * box.size / 2.0
    if (np.abs(local) > limit[None, :]).any():
        out.append(Violation("asset.geometry_outside_box", path,
                             f"geometry exceeds {GEOMETRY_FIT_FACTOR}x box extents"))


def validate_scene(scene: Scene) -> list[Violation]:
    out: list[Violation] = []

    cam = scene.camera
    if cam.fx <= 0 or cam.fy <= 0:
        out.append(Violation("camera.focal_nonpositive", "camera", "fx, fy must be > 0"))
    if not (0 < cam.near < cam.far):
        out.append(Violation("camera.clip_planes", "camera", "need 0 < near < far"))
    if cam.width < 1 or cam.height < 1:
        out.append(Violation("camera.image_size", "camera", "width, height must be >= 1"))
    _check_pose(scene.camera_in_ego, "camera_in_ego", out)

    if scene.timeline.size == 0 or (scene.timeline.size > 1
                                    and (np.diff(scene.timeline) <= 0).any()):
        idx = 0
        if scene.timeline.size > 1:
            bad = np.nonzero(np.diff(scene.timeline) <= 0)[0]
            idx = int(bad[0]) + 1 if bad.size else 0
        out.append(Violation("scene.timeline_not_increasing", f"timeline[{idx}]",
                             "timeline must be nonempty and strictly increasing"))

    _check_field(scene.background, "background", out)
    if len(scene.background) and scene.background.frame != "world":
        out.append(Violation("field.sh_degree", "background.frame",
                             "background field must be in the world frame"))

    seen = set()
    for i, asset in enumerate(scene.assets):
        path = f"assets[{i}]({asset.id})"
        if asset.id in seen or asset.id == EGO_ID:
            out.append(Violation("scene.duplicate_asset_id", path,
                                 "asset ids must be unique and not 'ego'"))
        seen.add(asset.id)
        if (asset.box.size <= 0).any():
            out.append(Violation("box.size_nonpositive", f"{path}.box", "box size must be > 0"))
        _check_pose(asset.box.center_pose, f"{path}.box.center_pose", out)
        if asset.splats is None and asset.mesh is None:
            out.append(Violation("asset.no_geometry", path,
                                 "asset needs splats and/or a mesh"))
        if asset.splats is not None:
            _check_field(asset.splats, f"{path}.splats", out)
            if len(asset.splats) and (asset.box.size > 0).all():
                _geometry_fits_box(asset.splats.means, asset, f"{path}.splats", out)
        if asset.mesh is not None:
            _check_mesh(asset.mesh, f"{path}.mesh", out)
            if (asset.box.size > 0).all() and np.isfinite(asset.mesh.vertices).all():
                _geometry_fits_box(asset.mesh.vertices, asset, f"{path}.mesh", out)
        if asset.id not in scene.trajectories:
            out.append(Violation("scene.trajectory_missing", path,
                                 f"no trajectory for asset {asset.id!r}"))

    if EGO_ID not in scene.trajectories:
        out.append(Violation("scene.ego_missing", "trajectories", "no ego trajectory"))
    asset_ids = {a.id for a in scene.assets}
    for key, traj in scene.trajectories.items():
        if key != EGO_ID and key not in asset_ids:
            out.append(Violation("scene.trajectory_orphan", f"trajectories[{key}]",
                                 "trajectory without matching asset"))
        _check_trajectory(traj, f"trajectories[{key}]", out)

    return out


def validate_frames(seq: FrameSequence,
                    masks: InstanceMaskSequence | None = None) -> list[Violation]:
    out: list[Violation] = []
    if not seq.frames:
        return out
    h, w = seq.frames[0].rgb.shape[:2]
    for i, fb in enumerate(seq.frames):
        if fb.rgb.shape != (h, w, 3) or fb.depth.shape != (h, w) \
                or fb.instance_ids.shape != (h, w):
            out.append(Violation("frames.dims_mismatch", f"frames[{i}]",
                                 "frame buffers must share dimensions"))
            continue
        if (fb.depth < 0).any():
            out.append(Violation("frames.negative_depth", f"frames[{i}].depth",
                                 "depth must be >= 0"))
    if masks is not None:
        for t, per_frame in enumerate(masks.masks):
            for key, m in per_frame.items():
                if m.shape != (h, w):
                    out.append(Violation("masks.dims_mismatch", f"masks[{t}][{key}]",
                                         "mask dimensions must match frames"))
    return out
