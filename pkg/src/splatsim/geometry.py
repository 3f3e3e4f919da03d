"""SE(3) algebra, trajectory sampling, projection, and occlusion accounting.

All functions are pure. Quaternions are (w, x, y, z); poses map child-frame
points into the parent frame (p' = R p + t).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import RenderError
from .scene.types import BoundingBox3D, CameraModel, Pose, Scene, Trajectory


@dataclass(frozen=True)
class PoseDistanceWeights:
    rotation_weight: float = 0.1


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    return np.asarray(q, dtype=np.float64) / np.linalg.norm(q)


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quats_to_matrices(qs: np.ndarray) -> np.ndarray:
    """Vectorized quat_to_matrix for an (N, 4) array -> (N, 3, 3)."""
    w, x, y, z = qs[:, 0], qs[:, 1], qs[:, 2], qs[:, 3]
    m = np.empty((qs.shape[0], 3, 3))
    m[:, 0, 0] = 1 - 2 * (y * y + z * z)
    m[:, 0, 1] = 2 * (x * y - w * z)
    m[:, 0, 2] = 2 * (x * z + w * y)
    m[:, 1, 0] = 2 * (x * y + w * z)
    m[:, 1, 1] = 1 - 2 * (x * x + z * z)
    m[:, 1, 2] = 2 * (y * z - w * x)
    m[:, 2, 0] = 2 * (x * z - w * y)
    m[:, 2, 1] = 2 * (y * z + w * x)
    m[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def quat_slerp(qa: np.ndarray, qb: np.ndarray, u: float) -> np.ndarray:
    """Shortest-arc spherical interpolation with the antipodal sign fix."""
    qa = quat_normalize(qa)
    qb = quat_normalize(qb)
    dot = float(np.dot(qa, qb))
    if dot < 0.0:
        qb = -qb
        dot = -dot
    if dot > 1.0 - 1e-10:
        return quat_normalize(qa + u * (qb - qa))
    theta = math.acos(min(dot, 1.0))
    s = math.sin(theta)
    return quat_normalize((math.sin((1 - u) * theta) / s) * qa
                          + (math.sin(u * theta) / s) * qb)


def compose(a: Pose, b: Pose) -> Pose:
    rot = quat_normalize(quat_multiply(a.rotation, b.rotation))
    trans = quat_to_matrix(a.rotation) @ b.translation + a.translation
    return Pose(rot, trans)


def inverse(p: Pose) -> Pose:
    q_inv = quat_conjugate(quat_normalize(p.rotation))
    return Pose(q_inv, -(quat_to_matrix(q_inv) @ p.translation))


def transform_points(pose: Pose, points: np.ndarray) -> np.ndarray:
    """Apply a pose to an (N, 3) array of points."""
    return points @ quat_to_matrix(pose.rotation).T + pose.translation


def sample_trajectory(traj: Trajectory, t: float) -> Pose:
    """Pose at time t: lerp translation, slerp rotation, clamped at the ends."""
    times = traj.times
    if t <= times[0]:
        return traj.poses[0]
    if t >= times[-1]:
        return traj.poses[-1]
    hi = int(np.searchsorted(times, t, side="right"))
    lo = hi - 1
    if times[lo] == t:
        return traj.poses[lo]
    u = (t - times[lo]) / (times[hi] - times[lo])
    pa, pb = traj.poses[lo], traj.poses[hi]
    return Pose(quat_slerp(pa.rotation, pb.rotation, u),
                (1 - u) * pa.translation + u * pb.translation)


def ego_frame_pose(ego: Pose, vehicle: Pose) -> Pose:
    return compose(inverse(ego), vehicle)


def pose_distance(a: Pose, b: Pose,
                  w: PoseDistanceWeights = PoseDistanceWeights()) -> float:
    dt = float(np.linalg.norm(a.translation - b.translation))
    dr = float(np.linalg.norm(quat_to_matrix(quat_normalize(a.rotation))
                              - quat_to_matrix(quat_normalize(b.rotation))))
    return dt + w.rotation_weight * dr


@dataclass(frozen=True)
class Rect:
    """Axis-aligned pixel rectangle, x0 <= x1 and y0 <= y1."""

    x0: float
    y0: float
    x1: float
    y1: float

    @property
    def area(self) -> float:
        return max(0.0, self.x1 - self.x0) * max(0.0, self.y1 - self.y0)

    def intersection(self, other: "Rect") -> Optional["Rect"]:
        x0, y0 = max(self.x0, other.x0), max(self.y0, other.y0)
        x1, y1 = min(self.x1, other.x1), min(self.y1, other.y1)
        if x0 >= x1 or y0 >= y1:
            return None
        return Rect(x0, y0, x1, y1)

    def iou(self, other: "Rect") -> float:
        inter = self.intersection(other)
        if inter is None:
            return 0.0
        union = self.area + other.area - inter.area
        return inter.area / union if union > 0 else 0.0


def camera_pose(ego: Pose, rig: Pose) -> Pose:
    """World pose of the camera: ego(t) composed with the camera-in-ego rig."""
    return compose(ego, rig)


def project_points(points_world: np.ndarray, cam_from_world: Pose,
                   cam: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    """Project world points; returns (pixels (N,2), camera-space depth (N,))."""
    pc = transform_points(cam_from_world, points_world)
    z = pc[:, 2]
    safe_z = np.where(np.abs(z) < 1e-12, 1e-12, z)
    px = np.stack([cam.fx * pc[:, 0] / safe_z + cam.cx,
                   cam.fy * pc[:, 1] / safe_z + cam.cy], axis=1)
    return px, z


def box_rect(box: BoundingBox3D, world_pose: Pose, cam_from_world: Pose,
             cam: CameraModel) -> Optional[Rect]:
    """Pixel-space bounding rectangle of the box's 8 projected corners,
    clipped to the image; None when every corner is behind the near plane.

    Corners that cross the near plane individually are clamped to z = near
    before the divide (conservative, keeps the rect finite)."""
    corners_world = transform_points(compose(world_pose, box.center_pose),
                                     box.corners_local())
    pc = transform_points(cam_from_world, corners_world)
    z = pc[:, 2]
    if (z < cam.near).all():
        return None
    z_clamped = np.maximum(z, cam.near)
    u = cam.fx * pc[:, 0] / z_clamped + cam.cx
    v = cam.fy * pc[:, 1] / z_clamped + cam.cy
    rect = Rect(float(np.clip(u.min(), 0, cam.width)),
                float(np.clip(v.min(), 0, cam.height)),
                float(np.clip(u.max(), 0, cam.width)),
                float(np.clip(v.max(), 0, cam.height)))
    if rect.area == 0.0:
        return None
    return rect


def project_box(box: BoundingBox3D, world_pose: Pose, ego: Pose,
                cam: CameraModel, rig: Pose) -> Optional[Rect]:
    """box_rect with the camera placed at ego(t) composed with the rig."""
    return box_rect(box, world_pose, inverse(camera_pose(ego, rig)), cam)


def rect_union_area(rects: Sequence[Rect]) -> float:
    """Exact area of a rectangle union by coordinate-compression sweep."""
    rects = [r for r in rects if r.area > 0]
    if not rects:
        return 0.0
    xs = np.unique(np.concatenate([[r.x0, r.x1] for r in rects]))
    total = 0.0
    for i in range(len(xs) - 1):
        x_mid = 0.5 * (xs[i] + xs[i + 1])
        strip = sorted((r.y0, r.y1) for r in rects if r.x0 <= x_mid <= r.x1)
        covered = 0.0
        cur_lo, cur_hi = None, None
        for y0, y1 in strip:
            if cur_lo is None:
                cur_lo, cur_hi = y0, y1
            elif y0 <= cur_hi:
                cur_hi = max(cur_hi, y1)
            else:
                covered += cur_hi - cur_lo
                cur_lo, cur_hi = y0, y1
        if cur_lo is not None:
            covered += cur_hi - cur_lo
        total += covered * (xs[i + 1] - xs[i])
    return float(total)


def occlusion_fraction_rects(target: Rect, target_depth: float,
                             others: Sequence[tuple[Rect, float]]) -> float:
    """Fraction of `target` covered by the union of nearer rectangles."""
    if target.area <= 0:
        raise RenderError("instance-not-visible: target projects to an empty rectangle")
    nearer = [r.intersection(target) for r, d in others if d < target_depth]
    clipped = [r for r in nearer if r is not None]
    return rect_union_area(clipped) / target.area


def occlusion_fraction(scene: Scene, t: float, instance: str,
                       cam: CameraModel, rig: Pose) -> float:
    """Fraction of `instance`'s projected rectangle covered by the union of
    other vehicles' rectangles that are nearer in camera depth (depths are
    compared at box centers)."""
    if scene.asset(instance) is None:
        raise RenderError(f"unknown instance {instance!r}")
    ego = sample_trajectory(scene.ego_trajectory(), t)
    cam_from_world = inverse(camera_pose(ego, rig))

    def center_depth(asset_id: str) -> float:
        pose = sample_trajectory(scene.trajectories[asset_id], t)
        box = scene.asset(asset_id).box
        center = compose(pose, box.center_pose).translation
        return float(transform_points(cam_from_world, center[None, :])[0, 2])

    target_rect = project_box(scene.asset(instance).box,
                              sample_trajectory(scene.trajectories[instance], t),
                              ego, cam, rig)
    if target_rect is None:
        raise RenderError(f"instance-not-visible: {instance!r} at t={t}")
    others = []
    for asset in scene.assets:
        if asset.id == instance:
            continue
        rect = project_box(asset.box, sample_trajectory(scene.trajectories[asset.id], t),
                           ego, cam, rig)
        if rect is not None:
            others.append((rect, center_depth(asset.id)))
    return occlusion_fraction_rects(target_rect, center_depth(instance), others)
