"""Domain types for splat-based driving scenes.

Conventions used throughout the package:

* Quaternions are stored (w, x, y, z) and should be unit norm.
* A ``Pose`` places a child frame inside a parent frame: ``p_parent =
  R @ p_child + t``.  Asset trajectories store the pose of the asset in
  the world frame; ``camera_in_ego`` stores the pose of the camera in
  the ego frame.
* Asset-local axes: x forward, y left, z up, origin at the box center.
* Angles are radians everywhere except the CLI boundary.

Constructors only coerce dtypes and shapes; semantic invariants (unit
quaternions, positive scales, ...) are reported by ``validate_scene`` /
``validate_frames`` so that malformed data can be represented and
flagged rather than crashing on load.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping, Optional, Sequence

import numpy as np

EGO_ID = "ego"


def _freeze(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def _farray(values, shape: tuple[int, ...] | None = None) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, copy=True)
    if shape is not None and arr.shape != shape:
        raise ValueError(f"expected array of shape {shape}, got {arr.shape}")
    return _freeze(arr)


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform: rotation quaternion (w,x,y,z) + translation (m)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _farray(self.rotation, (4,)))
        object.__setattr__(self, "translation", _farray(self.translation, (3,)))

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @staticmethod
    def from_yaw(yaw: float, translation=(0.0, 0.0, 0.0)) -> "Pose":
        """Rotation about world +z by ``yaw`` radians, then translate."""
        return Pose(np.array([math.cos(yaw / 2.0), 0.0, 0.0, math.sin(yaw / 2.0)]),
                    np.asarray(translation, dtype=np.float64))

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        # q and -q are the same rotation
        q = self.rotation if float(np.dot(self.rotation, other.rotation)) >= 0 else -self.rotation
        return bool(np.allclose(q, other.rotation, atol=atol)
                    and np.allclose(self.translation, other.translation, atol=atol))

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return (np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Time-indexed poses of one asset (or the ego vehicle)."""

    times: np.ndarray
    poses: tuple[Pose, ...]

    def __post_init__(self):
        object.__setattr__(self, "times", _farray(np.atleast_1d(self.times)))
        object.__setattr__(self, "poses", tuple(self.poses))
        if len(self.times) != len(self.poses):
            raise ValueError("times and poses length mismatch")

    def __len__(self) -> int:
        return len(self.poses)

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return np.array_equal(self.times, other.times) and self.poses == other.poses


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float
    far: float

    def scaled(self, factor_x: float, factor_y: float) -> "CameraModel":
        return CameraModel(self.fx * factor_x, self.fy * factor_y,
                           self.cx * factor_x, self.cy * factor_y,
                           int(round(self.width * factor_x)),
                           int(round(self.height * factor_y)),
                           self.near, self.far)


@dataclass(frozen=True, eq=False)
class GaussianPrimitive:
    """One anisotropic 3D Gaussian: mean, scale, rotation, opacity, SH color."""

    mean: np.ndarray        # (3,) m
    scale: np.ndarray       # (3,) m, positive
    rotation: np.ndarray    # (4,) unit quaternion wxyz
    opacity: float          # [0, 1]
    sh: np.ndarray          # ((L+1)^2, 3) coefficients, row 0 = DC

    def __post_init__(self):
        object.__setattr__(self, "mean", _farray(self.mean, (3,)))
        object.__setattr__(self, "scale", _farray(self.scale, (3,)))
        object.__setattr__(self, "rotation", _farray(self.rotation, (4,)))
        object.__setattr__(self, "opacity", float(self.opacity))
        sh = np.array(self.sh, dtype=np.float64, copy=True)
        if sh.ndim != 2 or sh.shape[1] != 3:
            raise ValueError("sh must have shape (num_coeffs, 3)")
        object.__setattr__(self, "sh", _freeze(sh))


def sh_degree_for_coeff_count(k: int) -> int:
    """Inverse of (L+1)^2; returns -1 when k is not a valid coefficient count."""
    root = int(round(math.sqrt(k)))
    if root * root == k and 1 <= root <= 4:
        return root - 1
    return -1


@dataclass(frozen=True, eq=False)
class GaussianField:
    """A set of splats stored struct-of-arrays; ``frame`` is where means live."""

    means: np.ndarray       # (N, 3)
    scales: np.ndarray      # (N, 3)
    rotations: np.ndarray   # (N, 4)
    opacities: np.ndarray   # (N,)
    sh: np.ndarray          # (N, K, 3)
    frame: str = "world"    # "world" | "asset_local"
    allow_empty: bool = False

    def __post_init__(self):
        n = np.asarray(self.means).shape[0] if np.asarray(self.means).size else 0
        means = np.array(self.means, dtype=np.float64, copy=True).reshape(n, 3)
        scales = np.array(self.scales, dtype=np.float64, copy=True).reshape(n, 3)
        rots = np.array(self.rotations, dtype=np.float64, copy=True).reshape(n, 4)
        opac = np.array(self.opacities, dtype=np.float64, copy=True).reshape(n)
        sh = np.array(self.sh, dtype=np.float64, copy=True)
        if sh.ndim != 3 or sh.shape[0] != n or sh.shape[2] != 3:
            sh = sh.reshape(n, -1, 3)
        for name, arr in (("means", means), ("scales", scales), ("rotations", rots),
                          ("opacities", opac), ("sh", sh)):
            object.__setattr__(self, name, _freeze(arr))
        if self.frame not in ("world", "asset_local"):
            raise ValueError(f"unknown field frame {self.frame!r}")

    @staticmethod
    def empty(frame: str = "world", degree: int = 0) -> "GaussianField":
        k = (degree + 1) ** 2
        return GaussianField(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)),
                             np.zeros(0), np.zeros((0, k, 3)), frame=frame,
                             allow_empty=True)

    @staticmethod
    def from_primitives(prims: Sequence[GaussianPrimitive], frame: str = "world",
                        allow_empty: bool = False) -> "GaussianField":
        if not prims:
            f = GaussianField.empty(frame=frame)
            return f if allow_empty else GaussianField(
                f.means, f.scales, f.rotations, f.opacities, f.sh,
                frame=frame, allow_empty=False)
        ks = {p.sh.shape[0] for p in prims}
        if len(ks) != 1:
            raise ValueError("all primitives in a field must share SH degree")
        return GaussianField(
            np.stack([p.mean for p in prims]),
            np.stack([p.scale for p in prims]),
            np.stack([p.rotation for p in prims]),
            np.array([p.opacity for p in prims]),
            np.stack([p.sh for p in prims]),
            frame=frame, allow_empty=allow_empty)

    @property
    def degree(self) -> int:
        return sh_degree_for_coeff_count(self.sh.shape[1])

    @property
    def primitives(self) -> tuple[GaussianPrimitive, ...]:
        return tuple(GaussianPrimitive(self.means[i], self.scales[i],
                                       self.rotations[i], self.opacities[i],
                                       self.sh[i]) for i in range(len(self)))

    def replace_params(self, means=None, scales=None, rotations=None,
                       opacities=None, sh=None) -> "GaussianField":
        return GaussianField(
            self.means if means is None else means,
            self.scales if scales is None else scales,
            self.rotations if rotations is None else rotations,
            self.opacities if opacities is None else opacities,
            self.sh if sh is None else sh,
            frame=self.frame, allow_empty=self.allow_empty)

    def __len__(self) -> int:
        return self.means.shape[0]

    def __eq__(self, other):
        if not isinstance(other, GaussianField):
            return NotImplemented
        return (self.frame == other.frame and self.allow_empty == other.allow_empty
                and all(np.array_equal(getattr(self, n), getattr(other, n))
                        for n in ("means", "scales", "rotations", "opacities", "sh")))


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray       # (V, 3) m
    triangles: np.ndarray      # (T, 3) int
    vertex_colors: np.ndarray  # (V, 3) in [0,1]

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64, copy=True).reshape(-1, 3)
        t = np.array(self.triangles, dtype=np.int32, copy=True).reshape(-1, 3)
        c = np.array(self.vertex_colors, dtype=np.float64, copy=True).reshape(-1, 3)
        object.__setattr__(self, "vertices", _freeze(v))
        object.__setattr__(self, "triangles", _freeze(t))
        object.__setattr__(self, "vertex_colors", _freeze(c))

    def __eq__(self, other):
        if not isinstance(other, TriangleMesh):
            return NotImplemented
        return all(np.array_equal(getattr(self, n), getattr(other, n))
                   for n in ("vertices", "triangles", "vertex_colors"))


@dataclass(frozen=True, eq=False)
class BoundingBox3D:
    """Oriented 3D box: size = (length, width, height); center_pose places the
    box-local frame (x forward, y left, z up) in the asset frame."""

    size: np.ndarray
    center_pose: Pose = field(default_factory=Pose.identity)

    def __post_init__(self):
        object.__setattr__(self, "size", _farray(self.size, (3,)))

    @property
    def length(self) -> float:
        return float(self.size[0])

    def corners_local(self) -> np.ndarray:
        """8 corners in the box-local frame, fixed enumeration order."""
        half = self.size / 2.0
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1)
                          for sz in (-1, 1)], dtype=np.float64)
        return signs * half

    def __eq__(self, other):
        if not isinstance(other, BoundingBox3D):
            return NotImplemented
        return np.array_equal(self.size, other.size) and self.center_pose == other.center_pose


@dataclass(frozen=True, eq=False)
class RigidAsset:
    id: str
    klass: str                                 # "vehicle" | "other"
    box: BoundingBox3D
    splats: Optional[GaussianField] = None     # asset_local frame
    mesh: Optional[TriangleMesh] = None
    lidar_point_counts: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        if self.lidar_point_counts is not None:
            object.__setattr__(self, "lidar_point_counts",
                               tuple(int(c) for c in self.lidar_point_counts))

    def __eq__(self, other):
        if not isinstance(other, RigidAsset):
            return NotImplemented
        return (self.id == other.id and self.klass == other.klass
                and self.box == other.box and self.splats == other.splats
                and self.mesh == other.mesh
                and self.lidar_point_counts == other.lidar_point_counts)


@dataclass(frozen=True, eq=False)
class Scene:
    background: GaussianField
    assets: tuple[RigidAsset, ...]
    trajectories: Mapping[str, Trajectory]     # asset ids plus EGO_ID
    camera: CameraModel
    camera_in_ego: Pose
    timeline: np.ndarray
    scene_id: str = "scene"

    def __post_init__(self):
        object.__setattr__(self, "assets", tuple(self.assets))
        object.__setattr__(self, "trajectories",
                           MappingProxyType(dict(self.trajectories)))
        object.__setattr__(self, "timeline", _farray(np.atleast_1d(self.timeline)))

    def asset(self, asset_id: str) -> Optional[RigidAsset]:
        for a in self.assets:
            if a.id == asset_id:
                return a
        return None

    def ego_trajectory(self) -> Trajectory:
        return self.trajectories[EGO_ID]

    def replace(self, **kwargs) -> "Scene":
        state = dict(background=self.background, assets=self.assets,
                     trajectories=dict(self.trajectories), camera=self.camera,
                     camera_in_ego=self.camera_in_ego, timeline=self.timeline,
                     scene_id=self.scene_id)
        state.update(kwargs)
        return Scene(**state)

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (self.scene_id == other.scene_id
                and self.background == other.background
                and self.assets == other.assets
                and dict(self.trajectories) == dict(other.trajectories)
                and self.camera == other.camera
                and self.camera_in_ego == other.camera_in_ego
                and np.array_equal(self.timeline, other.timeline))


@dataclass(frozen=True, eq=False)
class FrameBuffer:
    """One rendered frame: RGB in [0,1], depth in meters, instance-id map.

    ``instance_ids`` holds indices into ``id_table``; -1 means background."""

    rgb: np.ndarray            # (H, W, 3) float
    depth: np.ndarray          # (H, W) float
    instance_ids: np.ndarray   # (H, W) int32
    id_table: tuple[str, ...] = ()

    def __post_init__(self):
        rgb = np.array(self.rgb, dtype=np.float64, copy=True)
        depth = np.array(self.depth, dtype=np.float64, copy=True)
        ids = np.array(self.instance_ids, dtype=np.int32, copy=True)
        for name, arr in (("rgb", rgb), ("depth", depth), ("instance_ids", ids)):
            object.__setattr__(self, name, _freeze(arr))
        object.__setattr__(self, "id_table", tuple(self.id_table))

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]

    def id_at(self, row: int, col: int) -> Optional[str]:
        idx = int(self.instance_ids[row, col])
        return None if idx < 0 else self.id_table[idx]

    def __eq__(self, other):
        if not isinstance(other, FrameBuffer):
            return NotImplemented
        return (self.id_table == other.id_table
                and np.array_equal(self.rgb, other.rgb)
                and np.array_equal(self.depth, other.depth)
                and np.array_equal(self.instance_ids, other.instance_ids))


@dataclass(frozen=True, eq=False)
class FrameSequence:
    frames: tuple[FrameBuffer, ...]
    times: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        object.__setattr__(self, "times", _farray(np.atleast_1d(self.times)))

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, i: int) -> FrameBuffer:
        return self.frames[i]

    @property
    def width(self) -> int:
        return self.frames[0].width

    @property
    def height(self) -> int:
        return self.frames[0].height

    def rgb_stack(self) -> np.ndarray:
        return np.stack([f.rgb for f in self.frames])

    def __eq__(self, other):
        if not isinstance(other, FrameSequence):
            return NotImplemented
        return np.array_equal(self.times, other.times) and self.frames == other.frames


@dataclass(frozen=True, eq=False)
class InstanceMaskSequence:
    """Per-frame binary masks keyed by instance id."""

    masks: tuple[Mapping[str, np.ndarray], ...]

    def __post_init__(self):
        frozen = []
        for per_frame in self.masks:
            frozen.append(MappingProxyType(
                {k: _freeze(np.array(v, dtype=bool, copy=True))
                 for k, v in per_frame.items()}))
        object.__setattr__(self, "masks", tuple(frozen))

    @staticmethod
    def from_frames(seq: FrameSequence) -> "InstanceMaskSequence":
        out = []
        for fb in seq.frames:
            per = {}
            for idx, name in enumerate(fb.id_table):
                m = fb.instance_ids == idx
                if m.any():
                    per[name] = m
            out.append(per)
        return InstanceMaskSequence(tuple(out))

    def union_foreground(self, t: int, shape: tuple[int, int]) -> np.ndarray:
        union = np.zeros(shape, dtype=bool)
        for m in self.masks[t].values():
            union |= m
        return union

    def __len__(self) -> int:
        return len(self.masks)


@dataclass(frozen=True)
class Violation:
    code: str
    path: str
    message: str

    def __str__(self) -> str:
        return f"{self.code} at {self.path}: {self.message}"
