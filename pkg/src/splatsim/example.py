"""Procedural example scene: a short straight-road drive with two cars.

Small enough to render in milliseconds (64x48, 8 frames) yet exercises every
scene feature: a world-frame background field, two vehicle assets carrying
splats, meshes, boxes and lidar counts, a mesh-only road plane, and an ego
trajectory with a camera rig.  The CLI accepts ``example`` (or
``example:<seed>``) wherever a scene path is expected.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .rasterize import SH_C0
from .scene.types import (EGO_ID, BoundingBox3D, CameraModel, GaussianField,
                          Pose, RigidAsset, Scene, Trajectory, TriangleMesh)

# camera axes (+z forward, +x right, +y down) expressed in the ego frame
# (x forward, y left, z up): a fixed 120-degree rotation.
CAMERA_IN_EGO = Pose(np.array([0.5, -0.5, 0.5, -0.5]), np.array([1.2, 0.0, 1.4]))


def _dc(color) -> np.ndarray:
    """DC coefficients that decode to `color` through 0.5 + C0 * dc."""
    return (np.asarray(color, dtype=np.float64) - 0.5) / SH_C0


def _f32(a: np.ndarray) -> np.ndarray:
    """Snap to float32-representable values so the scene survives blob
    serialization (which stores float32) without any drift."""
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def _random_rotations(rng: np.random.Generator, n: int) -> np.ndarray:
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def _background_field(rng: np.random.Generator) -> GaussianField:
    """Roadside clutter plus a few distant building blobs, degree-1 SH."""
    n_side, n_far = 36, 8
    side = rng.integers(0, 2, size=n_side) * 2 - 1  # left / right of road
    # clutter starts past the ego's drive (camera x stays below 16): a splat
    # grazing the lens projects to a screen-filling ellipse, which would
    # wash out whole frames
    means_side = np.stack([
        rng.uniform(18.0, 58.0, size=n_side),
        side * rng.uniform(4.5, 9.0, size=n_side),
        rng.uniform(0.3, 3.0, size=n_side)], axis=1)
    means_far = np.stack([
        rng.uniform(25.0, 70.0, size=n_far),
        rng.uniform(-14.0, 14.0, size=n_far),
        rng.uniform(2.0, 7.0, size=n_far)], axis=1)
    means = np.concatenate([means_side, means_far])
    n = len(means)
    scales = np.concatenate([
        rng.uniform(0.25, 1.1, size=(n_side, 3)),
        rng.uniform(1.0, 3.0, size=(n_far, 3))])
    greens = np.stack([rng.uniform(0.15, 0.35, n_side),
                       rng.uniform(0.35, 0.6, n_side),
                       rng.uniform(0.1, 0.3, n_side)], axis=1)
    grays = np.stack([rng.uniform(0.4, 0.6, n_far)] * 3, axis=1)
    sh = np.zeros((n, 4, 3))
    sh[:, 0, :] = _dc(np.concatenate([greens, grays]))
    sh[:, 1:, :] = rng.normal(scale=0.05, size=(n, 3, 3))
    return GaussianField(_f32(means), _f32(scales), _f32(_random_rotations(rng, n)),
                         _f32(rng.uniform(0.55, 0.95, size=n)), _f32(sh),
                         frame="world")


def _cuboid_mesh(half: np.ndarray, color: np.ndarray) -> TriangleMesh:
    sx, sy, sz = half
    verts = np.array([[x, y, z] for x in (-sx, sx) for y in (-sy, sy)
                      for z in (-sz, sz)])
    # 12 triangles over the 8 corners enumerated as (x, y, z) sign bits
    tris = np.array([
        [0, 1, 3], [0, 3, 2],  # -x face
        [4, 6, 7], [4, 7, 5],  # +x face
        [0, 4, 5], [0, 5, 1],  # -y face
        [2, 3, 7], [2, 7, 6],  # +y face
        [0, 2, 6], [0, 6, 4],  # -z face
        [1, 5, 7], [1, 7, 3],  # +z face
    ], dtype=np.int32)
    shade = np.linspace(0.85, 1.1, len(verts))[:, None]
    colors = np.clip(color[None, :] * shade, 0.0, 1.0)
    return TriangleMesh(_f32(verts), tris, _f32(colors))


def _vehicle_asset(asset_id: str, paint, rng: np.random.Generator,
                   n_splats: int = 14) -> RigidAsset:
    box = BoundingBox3D(np.array([4.2, 1.9, 1.6]))
    half = box.size / 2.0
    means = rng.uniform(-0.85, 0.85, size=(n_splats, 3)) * half
    paint = np.asarray(paint, dtype=np.float64)
    body = np.clip(paint[None, :] + rng.normal(scale=0.06, size=(n_splats, 3)),
                   0.05, 0.95)
    sh = np.zeros((n_splats, 4, 3))
    sh[:, 0, :] = _dc(body)
    sh[:, 1:, :] = rng.normal(scale=0.03, size=(n_splats, 3, 3))
    splats = GaussianField(_f32(means), _f32(rng.uniform(0.25, 0.5, size=(n_splats, 3))),
                           _f32(_random_rotations(rng, n_splats)),
                           _f32(rng.uniform(0.75, 0.95, size=n_splats)), _f32(sh),
                           frame="asset_local")
    mesh = _cuboid_mesh(half * 0.9, paint)
    return RigidAsset(id=asset_id, klass="vehicle", box=box, splats=splats,
                      mesh=mesh)


def _road_asset() -> RigidAsset:
    box = BoundingBox3D(np.array([64.0, 14.0, 0.4]))
    xs = np.linspace(-28.0, 28.0, 9)
    ys = np.array([-6.0, 0.0, 6.0])
    verts = np.array([[x, y, 0.0] for y in ys for x in xs])
    tris = []
    for r in range(len(ys) - 1):
        for c in range(len(xs) - 1):
            a = r * len(xs) + c
            b = a + 1
            d = a + len(xs)
            e = d + 1
            tris += [[a, b, e], [a, e, d]]
    shades = 0.32 + 0.06 * ((np.arange(len(verts)) % 2).astype(float))
    colors = np.stack([shades] * 3, axis=1)
    return RigidAsset(id="road", klass="other", box=box, splats=None,
                      mesh=TriangleMesh(verts, np.array(tris, dtype=np.int32),
                                        _f32(colors)))


def _line_trajectory(times: np.ndarray, start, velocity, yaw: float = 0.0) -> Trajectory:
    start = np.asarray(start, dtype=np.float64)
    velocity = np.asarray(velocity, dtype=np.float64)
    poses = tuple(Pose.from_yaw(yaw, start + velocity * t) for t in times)
    return Trajectory(times, poses)


def make_example_scene(seed: int = 0, n_frames: int = 8,
                       width: int = 64, height: int = 48) -> Scene:
    """Deterministic demo scene; same (seed, size) always gives equal bytes."""
    rng = np.random.default_rng(seed)
    times = np.arange(n_frames, dtype=np.float64) * 0.5

    camera = CameraModel(fx=60.0, fy=60.0, cx=width / 2.0, cy=height / 2.0,
                         width=width, height=height, near=0.1, far=200.0)

    lead = _vehicle_asset("car-lead", (0.62, 0.12, 0.12), rng)
    oncoming = _vehicle_asset("car-oncoming", (0.15, 0.25, 0.65), rng)
    road = _road_asset()

    trajectories = {
        EGO_ID: _line_trajectory(times, (0.0, 0.0, 0.0), (4.0, 0.0, 0.0)),
        "car-lead": _line_trajectory(times, (10.0, 1.0, 0.8), (3.0, 0.0, 0.0)),
        "car-oncoming": _line_trajectory(times, (34.0, -2.6, 0.8),
                                         (-4.5, 0.0, 0.0), yaw=np.pi),
        # The road sits low enough that its box clears the vehicle boxes,
        # keeping the scene free of oriented-box conflicts.
        "road": Trajectory(times, tuple(Pose.from_yaw(0.0, (28.0, 0.0, -0.25))
                                        for _ in times)),
    }

    def counts(car: str) -> tuple[int, ...]:
        out = []
        for t in times:
            ego_p = trajectories[EGO_ID].poses[int(np.searchsorted(times, t))]
            car_p = trajectories[car].poses[int(np.searchsorted(times, t))]
            dist = float(np.linalg.norm(car_p.translation - ego_p.translation))
            out.append(max(1, int(round(3000.0 / max(dist, 1.0)))))
        return tuple(out)

    lead = dataclasses.replace(lead, lidar_point_counts=counts("car-lead"))
    oncoming = dataclasses.replace(oncoming,
                                   lidar_point_counts=counts("car-oncoming"))

    return Scene(background=_background_field(rng),
                 assets=(lead, oncoming, road),
                 trajectories=trajectories,
                 camera=camera,
                 camera_in_ego=CAMERA_IN_EGO,
                 timeline=times)


def resolve_scene_path(path_or_tag: str):
    """Scene loader hook: the literal tag ``example`` (optionally
    ``example:<seed>``) yields the procedural scene, any other string is a
    manifest path."""
    from .scene.io import load_scene
    text = str(path_or_tag)
    if text == "example" or text.startswith("example:"):
        seed = int(text.split(":", 1)[1]) if ":" in text else 0
        return make_example_scene(seed)
    return load_scene(text)
