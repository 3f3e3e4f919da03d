"""Scale-and-heading alignment of a canonical mesh to a ground-truth 3D box:
depth-RMS-minus-IoU score, 101-point grid search over uniform scale, two
heading candidates, best-observation-frame selection, and a pluggable
external oracle for heading disambiguation.
"""

from __future__ import annotations

import json
import math
import os
import subprocess
import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import geometry, rasterize
from .errors import AlignmentError, OracleProtocolError
from .geometry import Rect
from .scene.types import (BoundingBox3D, CameraModel, Pose, Scene,
                          TriangleMesh)

GRID_FRACTIONS = np.linspace(0.5, 1.5, 101)


class AlignmentWarning(UserWarning):
    """Degenerate-but-recoverable alignment situations (zero lidar counts,
    empty depth overlap, oracle fallback)."""


@dataclass(frozen=True)
class AlignmentProblem:
    """One mesh-to-box alignment instance.

    gt_box.center_pose is the box's WORLD pose here (no asset indirection).
    gt_depth is a crop over `crop` = (x0, y0, x1, y1) integer pixel bounds;
    invalid pixels are non-finite."""

    mesh: TriangleMesh
    gt_box: BoundingBox3D
    gt_depth: np.ndarray
    crop: tuple[int, int, int, int]
    camera: CameraModel
    cam_pose: Pose
    iou_weight: float = 1.0

    def __post_init__(self):
        if self.iou_weight < 0:
            raise AlignmentError("iou_weight must be >= 0")
        x0, y0, x1, y1 = self.crop
        gt = np.asarray(self.gt_depth, dtype=np.float64)
        if gt.shape != (y1 - y0, x1 - x0):
            raise AlignmentError("gt_depth shape does not match the crop")
        object.__setattr__(self, "gt_depth", gt)


@dataclass(frozen=True)
class AlignmentResult:
    scale: float
    heading: int                      # chosen candidate index, 0 or 1
    score: float
    score_curve: tuple[tuple[float, float], ...]  # (s, score) of the winner


def best_observation_frame(scene: Scene, instance: str) -> int:
    """Frame index with the most lidar points on the instance; ties break to
    the earliest frame. All-zero counts fall back to frame 0 with a warning."""
    asset = scene.asset(instance)
    if asset is None:
        raise AlignmentError(f"unknown instance {instance!r}")
    counts = asset.lidar_point_counts
    if counts is None:
        raise AlignmentError(f"missing-lidar-counts for {instance!r}")
    if all(c == 0 for c in counts):
        warnings.warn(f"all lidar counts zero for {instance!r}; using frame 0",
                      AlignmentWarning)
        return 0
    return int(np.argmax(np.asarray(counts)))


def candidate_headings(box: BoundingBox3D) -> tuple[Pose, Pose]:
    """The box pose and the box pose flipped by pi about its own +z axis."""
    base = box.center_pose
    flipped = geometry.compose(base, Pose.from_yaw(math.pi))
    return base, flipped


def _mesh_extent(mesh: TriangleMesh) -> np.ndarray:
    return mesh.vertices.max(axis=0) - mesh.vertices.min(axis=0)


def _mesh_center(mesh: TriangleMesh) -> np.ndarray:
    return 0.5 * (mesh.vertices.max(axis=0) + mesh.vertices.min(axis=0))


def render_candidate_depth(problem: AlignmentProblem, s: float,
                           heading: Pose) -> rasterize.MeshBuffers:
    """Rasterize the mesh scaled by s, centered on the box center, posed by
    the heading candidate, over the full image."""
    verts = (problem.mesh.vertices - _mesh_center(problem.mesh)) * s
    scaled = TriangleMesh(verts, problem.mesh.triangles,
                          problem.mesh.vertex_colors)
    return rasterize.rasterize_mesh(scaled, heading,
                                    geometry.inverse(problem.cam_pose),
                                    problem.camera)


def _footprint_rect(buffers: rasterize.MeshBuffers) -> Optional[Rect]:
    ys, xs = np.nonzero(buffers.has_fragment())
    if len(ys) == 0:
        return None
    return Rect(float(xs.min()), float(ys.min()),
                float(xs.max() + 1), float(ys.max() + 1))


def alignment_score(problem: AlignmentProblem, s: float, heading: Pose) -> float:
    """Depth RMS over mutually valid crop pixels minus iou_weight times the
    IoU of the mesh footprint rect vs the projected box rect. +inf when the
    depth term has no support."""
    if s <= 0:
        raise AlignmentError(f"scale must be > 0, got {s}")
    buffers = render_candidate_depth(problem, s, heading)
    x0, y0, x1, y1 = problem.crop
    mesh_crop = buffers.depth[y0:y1, x0:x1]
    valid = np.isfinite(problem.gt_depth) & np.isfinite(mesh_crop)
    if not valid.any():
        warnings.warn(f"no overlapping valid depth pixels at s={s:.4f}",
                      AlignmentWarning)
        return math.inf
    diff = mesh_crop[valid] - problem.gt_depth[valid]
    depth_term = float(np.sqrt(np.mean(diff * diff)))

    foot = _footprint_rect(buffers)
    box_r = geometry.box_rect(problem.gt_box, Pose.identity(),
                              geometry.inverse(problem.cam_pose),
                              problem.camera)
    iou = foot.iou(box_r) if (foot is not None and box_r is not None) else 0.0
    return depth_term - problem.iou_weight * iou


def align_mesh(problem: AlignmentProblem) -> AlignmentResult:
    """Grid search: s0 = box length / mesh x-extent, grid s0*[0.50..1.50] in
    1% steps, both heading candidates everywhere. Ties break toward smaller s
    then candidate 0."""
    mesh_len = float(_mesh_extent(problem.mesh)[0])
    if mesh_len <= 0:
        raise AlignmentError("mesh has zero length along x; cannot scale")
    s0 = problem.gt_box.length / mesh_len
    candidates = candidate_headings(problem.gt_box)

    best = (math.inf, None, None)   # score, s, heading index
    curves: dict[int, list[tuple[float, float]]] = {0: [], 1: []}
    for frac in GRID_FRACTIONS:
        s = float(s0 * frac)
        for h_idx, heading in enumerate(candidates):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", AlignmentWarning)
                score = alignment_score(problem, s, heading)
            curves[h_idx].append((s, score))
            if score < best[0]:
                best = (score, s, h_idx)
    if best[1] is None:
        raise AlignmentError("all-scores-infinite: no grid point produced "
                             "overlapping valid depth")
    return AlignmentResult(scale=best[1], heading=best[2], score=best[0],
                           score_curve=tuple(curves[best[2]]))


# ---------------------------------------------------------------------------
# Heading oracle protocol
#
# The module writes the two candidate renders and a query manifest into a
# directory; the oracle is any callable taking that directory path and
# returning "0" or "1". CommandHeadingOracle adapts an external command:
# the command is run with the manifest path as final argument and must print
# the answer on stdout.


class CommandHeadingOracle:
    def __init__(self, command: list[str], timeout: float = 60.0):
        self.command = list(command)
        self.timeout = timeout

    def __call__(self, query_dir: str) -> str:
        manifest = os.path.join(query_dir, "query.json")
        try:
            proc = subprocess.run(self.command + [manifest],
                                  capture_output=True, text=True,
                                  timeout=self.timeout, check=True)
        except (OSError, subprocess.SubprocessError) as exc:
            raise OracleProtocolError(f"heading oracle failed: {exc}") from exc
        return proc.stdout.strip()


def write_heading_query(problem: AlignmentProblem, query_dir: str,
                        s: Optional[float] = None) -> str:
    """Render both candidates to PNG and write query.json; returns the
    manifest path."""
    from .scene.frames import write_png

    os.makedirs(query_dir, exist_ok=True)
    if s is None:
        s = problem.gt_box.length / float(_mesh_extent(problem.mesh)[0])
    names = []
    for idx, heading in enumerate(candidate_headings(problem.gt_box)):
        buffers = render_candidate_depth(problem, s, heading)
        rgb = np.where(buffers.has_fragment()[..., None], buffers.color, 0.5)
        name = f"candidate_{idx}.png"
        write_png(rgb, os.path.join(query_dir, name))
        names.append(name)
    manifest = {
        "task": "choose the candidate whose heading matches the object",
        "answer_format": "print 0 or 1",
        "candidates": names,
        "box_size_lwh": [float(v) for v in problem.gt_box.size],
    }
    path = os.path.join(query_dir, "query.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
    return path


def resolve_heading(problem: AlignmentProblem,
                    oracle: Optional[Callable[[str], str]] = None,
                    query_dir: Optional[str] = None) -> int:
    """Choose a heading candidate. A configured oracle wins outright; absent
    or failing oracles fall back to the lower-score candidate (flagged)."""
    if oracle is not None:
        import tempfile
        created = None
        if query_dir is None:
            created = tempfile.mkdtemp(prefix="heading_query_")
            query_dir = created
        try:
            write_heading_query(problem, query_dir)
            answer = oracle(query_dir).strip()
            if answer not in ("0", "1"):
                raise OracleProtocolError(f"oracle answered {answer!r}, "
                                          "expected '0' or '1'")
            return int(answer)
        except OracleProtocolError as exc:
            warnings.warn(f"heading oracle fell back to scores: {exc}",
                          AlignmentWarning)
        finally:
            if created is not None:
                import shutil
                shutil.rmtree(created, ignore_errors=True)
    return align_mesh(problem).heading


# ---------------------------------------------------------------------------
# Problem construction from a rendered scene


def problem_from_scene(scene: Scene, instance: str, mesh: TriangleMesh,
                       iou_weight: float = 1.0,
                       frame_index: Optional[int] = None,
                       config: rasterize.RenderConfig = rasterize.RenderConfig()
                       ) -> AlignmentProblem:
    """Build an AlignmentProblem for `instance` at its best observation frame:
    gt_depth comes from the rendered depth buffer restricted to pixels whose
    front fragment belongs to the instance."""
    asset = scene.asset(instance)
    if asset is None:
        raise AlignmentError(f"unknown instance {instance!r}")
    if frame_index is None:
        frame_index = best_observation_frame(scene, instance)
    t = float(scene.timeline[frame_index])

    frame = rasterize.render_frame(scene, t, config)
    ego = geometry.sample_trajectory(scene.ego_trajectory(), t)
    cam_pose = geometry.camera_pose(ego, scene.camera_in_ego)

    asset_pose = geometry.sample_trajectory(scene.trajectories[instance], t)
    world_box = BoundingBox3D(asset.box.size,
                              geometry.compose(asset_pose, asset.box.center_pose))
    rect = geometry.box_rect(world_box, Pose.identity(),
                             geometry.inverse(cam_pose), scene.camera)
    if rect is None:
        raise AlignmentError(f"instance {instance!r} projects outside the view")
    x0, y0 = int(math.floor(rect.x0)), int(math.floor(rect.y0))
    x1, y1 = int(math.ceil(rect.x1)), int(math.ceil(rect.y1))

    inst_index = frame.id_table.index(instance)
    depth = np.where(frame.instance_ids == inst_index, frame.depth, np.inf)
    gt_depth = depth[y0:y1, x0:x1]
    return AlignmentProblem(mesh=mesh, gt_box=world_box, gt_depth=gt_depth,
                            crop=(x0, y0, x1, y1), camera=scene.camera,
                            cam_pose=cam_pose, iou_weight=iou_weight)
