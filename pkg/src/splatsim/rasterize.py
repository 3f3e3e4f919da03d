"""Software renderer: splat projection, tile-based alpha blending, z-buffered
mesh rasterization, and depth composition of the two.

Determinism contract: splats blend in exact depth order with ties broken by
primitive index; tiles own disjoint pixels, so multi-threaded and
single-threaded renders are bit-identical.

Rigid asset motion transforms splat means/rotations only; SH coefficients are
not re-rotated (view-dependent appearance rides along with the asset). View
directions are evaluated in the world frame per rendered frame.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from . import geometry
from .errors import RenderError
from .scene.types import (CameraModel, FrameBuffer, FrameSequence,
                          GaussianField, GaussianPrimitive, Pose, Scene,
                          TriangleMesh)

EXIT_EPS = 1e-4  # stop blending once transmittance drops below this

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)


@dataclass(frozen=True)
class RenderConfig:
    sh_degree_used: int = 3          # capped at the field's stored degree
    gaussian_cutoff: float = 3.0     # sigma radius
    background_color: tuple[float, float, float] = (0.0, 0.0, 0.0)
    tile_size: int = 16
    cov_dilation: float = 0.3        # px^2 added to the 2D covariance diagonal


@dataclass(frozen=True)
class Fragment:
    depth: float
    color: np.ndarray
    alpha: float
    instance: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "color",
                           np.asarray(self.color, dtype=np.float64).reshape(3))


# ---------------------------------------------------------------------------
# Spherical harmonics


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis rows for unit directions; shape (N, (degree+1)^2)."""
    dirs = np.atleast_2d(dirs)
    n = dirs.shape[0]
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    cols = [np.full(n, SH_C0)]
    if degree >= 1:
        cols += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        cols += [SH_C2[0] * x * y, SH_C2[1] * y * z,
                 SH_C2[2] * (2.0 * zz - xx - yy),
                 SH_C2[3] * x * z, SH_C2[4] * (xx - yy)]
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        cols += [SH_C3[0] * y * (3.0 * xx - yy),
                 SH_C3[1] * x * y * z,
                 SH_C3[2] * y * (4.0 * zz - xx - yy),
                 SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
                 SH_C3[4] * x * (4.0 * zz - xx - yy),
                 SH_C3[5] * z * (xx - yy),
                 SH_C3[6] * x * (xx - 3.0 * yy)]
    return np.stack(cols, axis=1)


def sh_basis_grad(dirs: np.ndarray, degree: int) -> np.ndarray:
    """d basis_k / d dir for unit directions; shape (N, (degree+1)^2, 3)."""
    dirs = np.atleast_2d(dirs)
    n = dirs.shape[0]
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    zero = np.zeros(n)
    rows = [np.stack([zero, zero, zero], axis=1)]
    if degree >= 1:
        rows += [np.stack([zero, np.full(n, -SH_C1), zero], axis=1),
                 np.stack([zero, zero, np.full(n, SH_C1)], axis=1),
                 np.stack([np.full(n, -SH_C1), zero, zero], axis=1)]
    if degree >= 2:
        rows += [SH_C2[0] * np.stack([y, x, zero], axis=1),
                 SH_C2[1] * np.stack([zero, z, y], axis=1),
                 SH_C2[2] * np.stack([-2 * x, -2 * y, 4 * z], axis=1),
                 SH_C2[3] * np.stack([z, zero, x], axis=1),
                 SH_C2[4] * np.stack([2 * x, -2 * y, zero], axis=1)]
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        rows += [SH_C3[0] * np.stack([6 * x * y, 3 * xx - 3 * yy, zero], axis=1),
                 SH_C3[1] * np.stack([y * z, x * z, x * y], axis=1),
                 SH_C3[2] * np.stack([-2 * x * y, 4 * zz - xx - 3 * yy, 8 * y * z], axis=1),
                 SH_C3[3] * np.stack([-6 * x * z, -6 * y * z, 6 * zz - 3 * xx - 3 * yy], axis=1),
                 SH_C3[4] * np.stack([4 * zz - 3 * xx - yy, -2 * x * y, 8 * x * z], axis=1),
                 SH_C3[5] * np.stack([2 * x * z, -2 * y * z, xx - yy], axis=1),
                 SH_C3[6] * np.stack([3 * xx - 3 * yy, -6 * x * y, zero], axis=1)]
    return np.stack(rows, axis=1)


def sh_eval(coeffs: np.ndarray, view_dir: np.ndarray, degree: int) -> np.ndarray:
    """Evaluate SH color for one splat: 0.5 offset, clamped to [0, 1]."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    k = (degree + 1) ** 2
    basis = sh_basis(np.asarray(view_dir, dtype=np.float64)[None, :], degree)[0]
    raw = 0.5 + basis @ coeffs[:k, :]
    return np.clip(raw, 0.0, 1.0)


def sh_eval_many(coeffs: np.ndarray, dirs: np.ndarray, degree: int
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Colors for many splats; also returns the pre-clamp raw values."""
    k = (degree + 1) ** 2
    basis = sh_basis(dirs, degree)                       # (N, k)
    raw = 0.5 + np.einsum("nk,nkc->nc", basis, coeffs[:, :k, :])
    return np.clip(raw, 0.0, 1.0), raw


# ---------------------------------------------------------------------------
# Projection


@dataclass
class ProjectedSplats:
    """Per-splat screen-space quantities (already restricted to valid rows)."""

    index: np.ndarray        # original primitive index, int
    mean2d: np.ndarray       # (N, 2)
    cov2d: np.ndarray        # (N, 2, 2)
    inv_cov: np.ndarray      # (N, 2, 2)
    depth: np.ndarray        # (N,)
    radius: np.ndarray       # (N,) pixel bound of the cutoff ellipse
    color: np.ndarray        # (N, 3) clamped SH color
    opacity: np.ndarray      # (N,)
    instance: np.ndarray     # (N,) int32, -1 = background
    # kept for the differentiable backward pass:
    cam_point: np.ndarray    # (N, 3) camera-space means
    raw_color: np.ndarray    # (N, 3) pre-clamp SH output
    view_dir: np.ndarray     # (N, 3)
    view_dist: np.ndarray    # (N,)


def _cov3d_world(scales: np.ndarray, rotations: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(rotations, axis=1, keepdims=True)
    rq = geometry.quats_to_matrices(rotations / norms)
    m = rq * scales[:, None, :]
    return m @ np.transpose(m, (0, 2, 1))


def project_gaussians(means: np.ndarray, scales: np.ndarray,
                      rotations: np.ndarray, opacities: np.ndarray,
                      sh: np.ndarray, instance: np.ndarray,
                      cam_pose: Pose, cam: CameraModel,
                      config: RenderConfig) -> ProjectedSplats:
    n = means.shape[0]
    cam_from_world = geometry.inverse(cam_pose)
    r_cw = geometry.quat_to_matrix(cam_from_world.rotation)
    pc = means @ r_cw.T + cam_from_world.translation
    depth = pc[:, 2]
    valid = depth >= cam.near

    idx = np.nonzero(valid)[0]
    pc = pc[idx]
    depth = depth[idx]
    z = depth
    x, y = pc[:, 0], pc[:, 1]

    mean2d = np.stack([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy], axis=1)

    cov3 = _cov3d_world(scales[idx], rotations[idx])
    cov3_cam = np.einsum("ij,njk,lk->nil", r_cw, cov3, r_cw)

    j = np.zeros((len(idx), 2, 3))
    j[:, 0, 0] = cam.fx / z
    j[:, 0, 2] = -cam.fx * x / (z * z)
    j[:, 1, 1] = cam.fy / z
    j[:, 1, 2] = -cam.fy * y / (z * z)
    cov2 = np.einsum("nab,nbc,ndc->nad", j, cov3_cam, j)
    cov2[:, 0, 0] += config.cov_dilation
    cov2[:, 1, 1] += config.cov_dilation

    a, b, c = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
    det = a * c - b * b
    inv_cov = np.empty_like(cov2)
    inv_cov[:, 0, 0] = c / det
    inv_cov[:, 0, 1] = -b / det
    inv_cov[:, 1, 0] = -b / det
    inv_cov[:, 1, 1] = a / det

    lam_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    radius = config.gaussian_cutoff * np.sqrt(lam_max)

    cam_center = cam_pose.translation
    offsets = means[idx] - cam_center
    dist = np.linalg.norm(offsets, axis=1)
    safe = np.where(dist < 1e-12, 1e-12, dist)
    dirs = offsets / safe[:, None]
    degree = min(config.sh_degree_used,
                 int(math.isqrt(sh.shape[1])) - 1 if sh.shape[1] else 0)
    color, raw = sh_eval_many(sh[idx], dirs, degree)

    return ProjectedSplats(index=idx, mean2d=mean2d, cov2d=cov2, inv_cov=inv_cov,
                           depth=depth, radius=radius, color=color,
                           opacity=np.asarray(opacities)[idx].astype(np.float64),
                           instance=np.asarray(instance)[idx].astype(np.int32),
                           cam_point=pc, raw_color=raw, view_dir=dirs,
                           view_dist=dist)


def project_gaussian(g: GaussianPrimitive, cam_from_world: Pose,
                     cam: CameraModel,
                     config: RenderConfig = RenderConfig()
                     ) -> Optional[tuple[np.ndarray, np.ndarray, float]]:
    """Single-splat projection: (mean2d px, cov2d px^2, depth m); None when
    the mean sits closer than the near plane."""
    proj = project_gaussians(g.mean[None, :], g.scale[None, :],
                             g.rotation[None, :], np.array([g.opacity]),
                             g.sh[None, :, :], np.array([-1], dtype=np.int32),
                             geometry.inverse(cam_from_world), cam, config)
    if len(proj.index) == 0:
        return None
    return proj.mean2d[0], proj.cov2d[0], float(proj.depth[0])


# ---------------------------------------------------------------------------
# Reference per-pixel blending (list based)


@dataclass(frozen=True)
class BlendResult:
    color: np.ndarray
    alpha_total: float
    depth_front: float
    instance: Optional[str] = None


def blend_pixel(frags: Sequence[Fragment],
                background_color=(0.0, 0.0, 0.0),
                far: float = float("inf")) -> BlendResult:
    """Front-to-back alpha blending of depth-sorted fragments.

    Early exit once transmittance < 1e-4; the remaining transmittance
    multiplies the background color. depth_front is the depth of the first
    fragment with alpha >= 0.5 (else `far`)."""
    depths = [f.depth for f in frags]
    assert depths == sorted(depths), "blend_pixel requires depth-sorted fragments"
    color = np.zeros(3)
    transmittance = 1.0
    alpha_total = 0.0
    depth_front = far
    instance = None
    for f in frags:
        if transmittance < EXIT_EPS:
            break
        weight = f.alpha * transmittance
        color = color + weight * f.color
        alpha_total += weight
        if f.alpha >= 0.5 and depth_front == far:
            depth_front = f.depth
            instance = f.instance
        transmittance *= (1.0 - f.alpha)
    color = color + transmittance * np.asarray(background_color, dtype=np.float64)
    return BlendResult(color=color, alpha_total=alpha_total,
                       depth_front=depth_front, instance=instance)


def composite(gauss_frags: Sequence[Sequence[Fragment]],
              mesh_frags: Sequence[Optional[Fragment]]
              ) -> list[list[Fragment]]:
    """Insert each pixel's opaque mesh fragment into its sorted gaussian list
    at its depth rank (gaussians win ties)."""
    if len(gauss_frags) != len(mesh_frags):
        raise RenderError("composite inputs must be aligned per pixel")
    merged = []
    for gauss, mesh in zip(gauss_frags, mesh_frags):
        pixel = list(gauss)
        if mesh is not None:
            pos = 0
            while pos < len(pixel) and pixel[pos].depth <= mesh.depth:
                pos += 1
            pixel.insert(pos, mesh)
        merged.append(pixel)
    return merged


# ---------------------------------------------------------------------------
# Mesh rasterization


@dataclass
class MeshBuffers:
    depth: np.ndarray      # (H, W), +inf where no fragment
    color: np.ndarray      # (H, W, 3)
    instance: np.ndarray   # (H, W) int32, -1 where none

    @staticmethod
    def empty(height: int, width: int) -> "MeshBuffers":
        return MeshBuffers(np.full((height, width), np.inf),
                           np.zeros((height, width, 3)),
                           np.full((height, width), -1, dtype=np.int32))

    def has_fragment(self) -> np.ndarray:
        return np.isfinite(self.depth)


def _clip_polygon_near(poly: list[tuple[np.ndarray, np.ndarray]], near: float
                       ) -> list[tuple[np.ndarray, np.ndarray]]:
    """Sutherland-Hodgman clip of a camera-space polygon against z >= near.
    Each entry is (point, color)."""
    out = []
    m = len(poly)
    for i in range(m):
        p0, c0 = poly[i]
        p1, c1 = poly[(i + 1) % m]
        in0, in1 = p0[2] >= near, p1[2] >= near
        if in0:
            out.append((p0, c0))
        if in0 != in1:
            u = (near - p0[2]) / (p1[2] - p0[2])
            out.append((p0 + u * (p1 - p0), c0 + u * (c1 - c0)))
    return out


def rasterize_mesh(mesh: TriangleMesh, world_pose: Pose, cam_from_world: Pose,
                   cam: CameraModel,
                   buffers: Optional[MeshBuffers] = None,
                   instance_index: int = -1) -> MeshBuffers:
    """Z-buffered, perspective-correct triangle fill with vertex colors.
    Backface culling is off; alpha is implicitly 1. Pixels sample at centers
    (x+0.5, y+0.5); the nearest fragment wins, earlier triangles win ties."""
    if buffers is None:
        buffers = MeshBuffers.empty(cam.height, cam.width)
    verts_world = geometry.transform_points(world_pose, mesh.vertices)
    verts_cam = geometry.transform_points(cam_from_world, verts_world)
    colors = mesh.vertex_colors

    for tri in mesh.triangles:
        poly = [(verts_cam[v].copy(), colors[v].copy()) for v in tri]
        poly = _clip_polygon_near(poly, cam.near)
        if len(poly) < 3:
            continue
        pts = np.array([p for p, _ in poly])
        cls = np.array([c for _, c in poly])
        z = pts[:, 2]
        us = cam.fx * pts[:, 0] / z + cam.cx
        vs = cam.fy * pts[:, 1] / z + cam.cy
        for k in range(1, len(poly) - 1):
            _fill_triangle(buffers, cam,
                           np.array([us[0], us[k], us[k + 1]]),
                           np.array([vs[0], vs[k], vs[k + 1]]),
                           np.array([z[0], z[k], z[k + 1]]),
                           np.array([cls[0], cls[k], cls[k + 1]]),
                           instance_index)
    return buffers


def _fill_triangle(buffers: MeshBuffers, cam: CameraModel, us, vs, zs, cols,
                   instance_index: int) -> None:
    area = (us[1] - us[0]) * (vs[2] - vs[0]) - (vs[1] - vs[0]) * (us[2] - us[0])
    if area == 0.0:
        return
    if area < 0:  # normalize winding so edge functions are >= 0 inside
        us, vs, zs, cols = us[[0, 2, 1]], vs[[0, 2, 1]], zs[[0, 2, 1]], cols[[0, 2, 1]]
        area = -area

    x0 = max(int(math.floor(us.min() - 0.5)), 0)
    x1 = min(int(math.ceil(us.max() - 0.5)), cam.width - 1)
    y0 = max(int(math.floor(vs.min() - 0.5)), 0)
    y1 = min(int(math.ceil(vs.max() - 0.5)), cam.height - 1)
    if x1 < x0 or y1 < y0:
        return

    px = np.arange(x0, x1 + 1) + 0.5
    py = np.arange(y0, y1 + 1) + 0.5
    gx, gy = np.meshgrid(px, py)

    def edge(ax, ay, bx, by):
        return (bx - ax) * (gy - ay) - (by - ay) * (gx - ax)

    w0 = edge(us[1], vs[1], us[2], vs[2])
    w1 = edge(us[2], vs[2], us[0], vs[0])
    w2 = edge(us[0], vs[0], us[1], vs[1])
    inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
    if not inside.any():
        return
    b0, b1, b2 = w0 / area, w1 / area, w2 / area
    inv_z = b0 / zs[0] + b1 / zs[1] + b2 / zs[2]
    with np.errstate(divide="ignore", invalid="ignore"):
        depth = np.where(inv_z > 0, 1.0 / inv_z, np.inf)
    color_over_z = (b0[..., None] * cols[0] / zs[0]
                    + b1[..., None] * cols[1] / zs[1]
                    + b2[..., None] * cols[2] / zs[2])
    color = np.where(inv_z[..., None] > 0, color_over_z / inv_z[..., None], 0.0)

    window_depth = buffers.depth[y0:y1 + 1, x0:x1 + 1]
    win = inside & (depth < window_depth)
    window_depth[win] = depth[win]
    buffers.color[y0:y1 + 1, x0:x1 + 1][win] = color[win]
    buffers.instance[y0:y1 + 1, x0:x1 + 1][win] = instance_index


# ---------------------------------------------------------------------------
# Frame rendering


@dataclass
class SplatScene:
    """World-space splats gathered for one frame plus mesh buffers."""

    means: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    opacities: np.ndarray
    sh: np.ndarray
    instance: np.ndarray
    # mapping from optimized background rows to gathered rows (for splatfit):
    background_rows: np.ndarray


def _transformed_asset_splats(field: GaussianField, pose: Pose):
    rot_m = geometry.quat_to_matrix(pose.rotation)
    means = field.means @ rot_m.T + pose.translation
    quats = np.array([geometry.quat_multiply(pose.rotation, q)
                      for q in field.rotations])
    return means, quats


def gather_world_splats(scene: Scene, t: float, *,
                        background: Optional[GaussianField] = None,
                        use_mesh_for: frozenset = frozenset()) -> SplatScene:
    """Background plus asset splats posed at time t, in blend index order.

    Assets in `use_mesh_for` render their mesh instead of their splats (when
    they have one); assets lacking splats always use their mesh."""
    bg = scene.background if background is None else background
    k = bg.sh.shape[1] if len(bg) else None
    means, scales, rots, opac, sh, inst = [], [], [], [], [], []
    if len(bg):
        means.append(bg.means)
        scales.append(bg.scales)
        rots.append(bg.rotations)
        opac.append(bg.opacities)
        sh.append(bg.sh)
        inst.append(np.full(len(bg), -1, dtype=np.int32))
    n_bg = len(bg)
    for ai, asset in enumerate(scene.assets):
        if asset.splats is None or len(asset.splats) == 0:
            continue
        if asset.id in use_mesh_for and asset.mesh is not None:
            continue
        pose = geometry.sample_trajectory(scene.trajectories[asset.id], t)
        m, q = _transformed_asset_splats(asset.splats, pose)
        k = asset.splats.sh.shape[1] if k is None else max(k, asset.splats.sh.shape[1])
        means.append(m)
        scales.append(asset.splats.scales)
        rots.append(q)
        opac.append(asset.splats.opacities)
        sh.append(asset.splats.sh)
        inst.append(np.full(len(asset.splats), ai, dtype=np.int32))
    if not means:
        kk = 1 if k is None else k
        return SplatScene(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)),
                          np.zeros(0), np.zeros((0, kk, 3)),
                          np.zeros(0, dtype=np.int32), np.arange(0))
    kk = max(s.shape[1] for s in sh)
    sh = [np.pad(s, ((0, 0), (0, kk - s.shape[1]), (0, 0))) if s.shape[1] < kk else s
          for s in sh]
    return SplatScene(np.concatenate(means), np.concatenate(scales),
                      np.concatenate(rots), np.concatenate(opac),
                      np.concatenate(sh), np.concatenate(inst),
                      np.arange(n_bg))


def gather_mesh_buffers(scene: Scene, t: float, cam_pose: Pose, *,
                        use_mesh_for: frozenset = frozenset()
                        ) -> Optional[MeshBuffers]:
    cam_from_world = geometry.inverse(cam_pose)
    buffers = None
    for ai, asset in enumerate(scene.assets):
        render_mesh = asset.mesh is not None and (
            asset.splats is None or len(asset.splats) == 0
            or asset.id in use_mesh_for)
        if not render_mesh:
            continue
        if buffers is None:
            buffers = MeshBuffers.empty(scene.camera.height, scene.camera.width)
        pose = geometry.sample_trajectory(scene.trajectories[asset.id], t)
        rasterize_mesh(asset.mesh, pose, cam_from_world, scene.camera,
                       buffers=buffers, instance_index=ai)
    return buffers


@dataclass
class TileRecord:
    """Everything the differentiable backward pass needs for one tile."""

    y0: int
    y1: int
    x0: int
    x1: int
    rows: np.ndarray          # indices into the ProjectedSplats arrays, sorted
    alpha: np.ndarray         # (P, M) effective alpha (0 when behind mesh/cut)
    gauss_weight: np.ndarray  # (P, M) exp(-q/2) before opacity
    in_front: np.ndarray      # (P, M) bool, nearer than the mesh fragment
    trans: np.ndarray         # (P, M+1) running transmittance
    processed: np.ndarray     # (P, M) bool
    diff: np.ndarray          # (P, M, 2) pixel - mean2d
    mesh_weight: np.ndarray   # (P,) transmittance applied to the mesh color
    bg_weight: np.ndarray     # (P,) transmittance applied to the background


def _tile_bounds(width: int, height: int, tile: int) -> list[tuple[int, int, int, int]]:
    out = []
    for y0 in range(0, height, tile):
        for x0 in range(0, width, tile):
            out.append((y0, min(y0 + tile, height), x0, min(x0 + tile, width)))
    return out


def _blend_tile(proj: ProjectedSplats, order: np.ndarray, bounds, cam, config,
                mesh: Optional[MeshBuffers], keep_record: bool):
    y0, y1, x0, x1 = bounds
    h, w = y1 - y0, x1 - x0
    p = h * w
    px = (np.arange(x0, x1) + 0.5)[None, :].repeat(h, axis=0).reshape(p)
    py = (np.arange(y0, y1) + 0.5)[:, None].repeat(w, axis=1).reshape(p)

    # bin: splats whose cutoff bbox touches the tile
    m2, rad = proj.mean2d[order], proj.radius[order]
    hit = ((m2[:, 0] + rad >= x0) & (m2[:, 0] - rad <= x1)
           & (m2[:, 1] + rad >= y0) & (m2[:, 1] - rad <= y1))
    rows = order[hit]
    m = len(rows)

    bg = np.asarray(config.background_color, dtype=np.float64)
    if mesh is not None:
        mesh_depth = mesh.depth[y0:y1, x0:x1].reshape(p)
        mesh_color = mesh.color[y0:y1, x0:x1].reshape(p, 3)
        mesh_inst = mesh.instance[y0:y1, x0:x1].reshape(p)
        has_mesh = np.isfinite(mesh_depth)
    else:
        mesh_depth = np.full(p, np.inf)
        mesh_color = np.zeros((p, 3))
        mesh_inst = np.full(p, -1, dtype=np.int32)
        has_mesh = np.zeros(p, dtype=bool)

    if m == 0:
        alpha = np.zeros((p, 0))
        gauss_weight = np.zeros((p, 0))
        in_front = np.zeros((p, 0), dtype=bool)
        diff = np.zeros((p, 0, 2))
    else:
        diff = np.stack([px[:, None] - proj.mean2d[rows, 0][None, :],
                         py[:, None] - proj.mean2d[rows, 1][None, :]], axis=2)
        a = proj.inv_cov[rows][:, 0, 0][None, :]
        b = proj.inv_cov[rows][:, 0, 1][None, :]
        c = proj.inv_cov[rows][:, 1, 1][None, :]
        q = (a * diff[:, :, 0] ** 2 + 2 * b * diff[:, :, 0] * diff[:, :, 1]
             + c * diff[:, :, 1] ** 2)
        inside = q <= config.gaussian_cutoff ** 2
        gauss_weight = np.where(inside, np.exp(-0.5 * q), 0.0)
        in_front = proj.depth[rows][None, :] <= mesh_depth[:, None]
        alpha = proj.opacity[rows][None, :] * gauss_weight * in_front

    trans = np.ones((p, m + 1))
    if m:
        np.cumprod(1.0 - alpha, axis=1, out=trans[:, 1:])
    processed = trans[:, :m] >= EXIT_EPS
    contrib = alpha * trans[:, :m] * processed

    color = contrib @ proj.color[rows] if m else np.zeros((p, 3))
    t_at_mesh = trans[:, m]
    mesh_processed = has_mesh & (t_at_mesh >= EXIT_EPS)
    mesh_weight = np.where(mesh_processed, t_at_mesh, 0.0)
    color += mesh_weight[:, None] * mesh_color

    # residual transmittance at the early-exit point (or the end of the list)
    below = trans < EXIT_EPS
    any_below = below.any(axis=1)
    first_below = np.argmax(below, axis=1)
    t_exit = np.where(any_below, trans[np.arange(p), first_below], trans[:, m])
    bg_weight = np.where(mesh_processed, 0.0, t_exit)
    color += bg_weight[:, None] * bg

    # depth_front and instance id from the first processed fragment with
    # alpha >= 0.5 (mesh fragments are alpha 1)
    depth_out = np.full(p, cam.far)
    inst_out = np.full(p, -1, dtype=np.int32)
    if mesh is not None:
        depth_out[mesh_processed] = mesh_depth[mesh_processed]
        inst_out[mesh_processed] = mesh_inst[mesh_processed]
    if m:
        heavy = (alpha >= 0.5) & processed
        has_heavy = heavy.any(axis=1)
        first_heavy = np.argmax(heavy, axis=1)
        rows_idx = rows[first_heavy]
        take = has_heavy
        depth_out[take] = proj.depth[rows_idx][take]
        inst_out[take] = proj.instance[rows_idx][take]

    record = None
    if keep_record:
        record = TileRecord(y0=y0, y1=y1, x0=x0, x1=x1, rows=rows, alpha=alpha,
                            gauss_weight=gauss_weight, in_front=in_front,
                            trans=trans, processed=processed, diff=diff,
                            mesh_weight=mesh_weight, bg_weight=bg_weight)
    return (color.reshape(h, w, 3), depth_out.reshape(h, w),
            inst_out.reshape(h, w), record)


def splat_forward(splats: SplatScene, cam_pose: Pose, cam: CameraModel,
                  config: RenderConfig, mesh: Optional[MeshBuffers] = None,
                  threads: int = 1, keep_records: bool = False):
    """Project + blend all splats into full-frame buffers.

    Returns (rgb, depth, instance_idx, proj, records)."""
    proj = project_gaussians(splats.means, splats.scales, splats.rotations,
                             splats.opacities, splats.sh, splats.instance,
                             cam_pose, cam, config)
    # exact depth order, ties by primitive index (lexsort: last key primary)
    order = np.lexsort((proj.index, proj.depth))

    rgb = np.empty((cam.height, cam.width, 3))
    depth = np.empty((cam.height, cam.width))
    inst = np.empty((cam.height, cam.width), dtype=np.int32)
    records: list[TileRecord] = []

    bounds = _tile_bounds(cam.width, cam.height, config.tile_size)

    def run(b):
        return b, _blend_tile(proj, order, b, cam, config, mesh, keep_records)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, bounds))
    else:
        results = [run(b) for b in bounds]

    for (y0, y1, x0, x1), (c, d, i, rec) in results:
        rgb[y0:y1, x0:x1] = c
        depth[y0:y1, x0:x1] = d
        inst[y0:y1, x0:x1] = i
        if rec is not None:
            records.append(rec)
    return rgb, depth, inst, proj, records


def render_frame(scene: Scene, t: float, config: RenderConfig = RenderConfig(),
                 *, threads: int = 1, background: Optional[GaussianField] = None,
                 use_mesh_for: frozenset = frozenset()) -> FrameBuffer:
    """Render the scene at time t: background field + assets posed by their
    trajectories; camera = ego(t) composed with the rig."""
    timeline = scene.timeline
    if not (timeline[0] - 1e-9 <= t <= timeline[-1] + 1e-9):
        raise RenderError(f"t={t} outside the scene timeline")
    ego = geometry.sample_trajectory(scene.ego_trajectory(), t)
    cam_pose = geometry.camera_pose(ego, scene.camera_in_ego)
    splats = gather_world_splats(scene, t, background=background,
                                 use_mesh_for=use_mesh_for)
    mesh = gather_mesh_buffers(scene, t, cam_pose, use_mesh_for=use_mesh_for)
    rgb, depth, inst, _, _ = splat_forward(splats, cam_pose, scene.camera,
                                           config, mesh=mesh, threads=threads)
    return FrameBuffer(np.clip(rgb, 0.0, 1.0), depth, inst,
                       tuple(a.id for a in scene.assets))


def render_sequence(scene: Scene, config: RenderConfig = RenderConfig(), *,
                    threads: int = 1, times: Optional[Iterable[float]] = None,
                    background: Optional[GaussianField] = None,
                    use_mesh_for: frozenset = frozenset()) -> FrameSequence:
    ts = np.asarray(list(times) if times is not None else scene.timeline,
                    dtype=np.float64)
    frames = tuple(render_frame(scene, float(t), config, threads=threads,
                                background=background, use_mesh_for=use_mesh_for)
                   for t in ts)
    return FrameSequence(frames, ts)
