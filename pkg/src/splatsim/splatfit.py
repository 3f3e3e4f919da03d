"""Photometric refitting of the scene background field with hand-derived
gradients, plus construction of (condition, target) training pairs via the
perturb-render-refit cycle and mesh substitution.

The backward pass differentiates the full forward chain: SH color (with clamp
gating), quaternion-to-rotation, 3D->2D covariance, the pinhole Jacobian, and
front-to-back alpha blending. The depth-sort order, cutoff indicator, early
exit points, and mesh occlusion masks are held fixed at the current iterate
(the standard treatment of the non-differentiable pieces); finite-difference
checks must therefore probe with steps small enough not to flip any of them.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import edit, geometry, rasterize
from .errors import FitError
from .rasterize import MeshBuffers, RenderConfig
from .scene.frames import load_frames, save_frames
from .scene.types import (FrameSequence, GaussianField, Pose, Scene)

PAIRS_FORMAT = "splatsim-pairs/1"

ALL_PARAMS = ("mean", "sh_dc", "opacity", "scale", "rotation")


@dataclass(frozen=True)
class FitConfig:
    iterations: int = 100
    step_size: float = 1.0
    optimized_params: tuple[str, ...] = ("mean", "sh_dc", "opacity")

    def __post_init__(self):
        if self.iterations < 0:
            raise FitError("iterations must be >= 0")
        if self.step_size <= 0:
            raise FitError("step_size must be > 0")
        bad = set(self.optimized_params) - set(ALL_PARAMS)
        if bad:
            raise FitError(f"unknown optimized params {sorted(bad)}")


@dataclass(frozen=True)
class TrainingPair:
    condition: FrameSequence
    target: FrameSequence
    provenance: str              # "cycle" | "mesh_substitution"
    seed: int
    perturbed: Optional[FrameSequence] = None  # the cycle's intermediate render

    def __post_init__(self):
        c, t = self.condition, self.target
        if (len(c.frames) != len(t.frames) or c.width != t.width
                or c.height != t.height):
            raise FitError("condition and target must share shape and length")


class FitContext:
    """Rendering context for fitting: the scene whose background the candidate
    field replaces, with per-frame camera poses and mesh buffers precomputed
    (assets are frozen during a fit)."""

    def __init__(self, scene: Scene, render_config: RenderConfig = RenderConfig(),
                 times: Optional[Sequence[float]] = None):
        self.scene = scene
        self.config = render_config
        self.times = tuple(float(t) for t in (times if times is not None
                                              else scene.timeline))
        self.cam_poses = {}
        self.mesh_buffers = {}
        for t in self.times:
            ego = geometry.sample_trajectory(scene.ego_trajectory(), t)
            pose = geometry.camera_pose(ego, scene.camera_in_ego)
            self.cam_poses[t] = pose
            self.mesh_buffers[t] = rasterize.gather_mesh_buffers(scene, t, pose)


def _forward(ctx: FitContext, field: GaussianField, t: float,
             keep_records: bool):
    splats = rasterize.gather_world_splats(ctx.scene, t, background=field)
    rgb, depth, inst, proj, records = rasterize.splat_forward(
        splats, ctx.cam_poses[t], ctx.scene.camera, ctx.config,
        mesh=ctx.mesh_buffers[t], keep_records=keep_records)
    return rgb, splats, proj, records


# ---------------------------------------------------------------------------
# Backward pass


def _blend_backward(proj, records, mesh: Optional[MeshBuffers],
                    config: RenderConfig, dl_dout: np.ndarray):
    """Accumulate gradients of the loss w.r.t. per-splat screen-space
    quantities (color, mean2d, cov2d, opacity) from per-tile blend records."""
    n = len(proj.index)
    g_color = np.zeros((n, 3))
    g_mean2d = np.zeros((n, 2))
    g_cov2 = np.zeros((n, 2, 2))
    g_opacity = np.zeros(n)
    bg = np.asarray(config.background_color, dtype=np.float64)

    for rec in records:
        m = len(rec.rows)
        p = (rec.y1 - rec.y0) * (rec.x1 - rec.x0)
        gout = dl_dout[rec.y0:rec.y1, rec.x0:rec.x1].reshape(p, 3)
        if mesh is not None:
            mesh_color = mesh.color[rec.y0:rec.y1, rec.x0:rec.x1].reshape(p, 3)
        else:
            mesh_color = np.zeros((p, 3))
        tail = rec.mesh_weight[:, None] * mesh_color + rec.bg_weight[:, None] * bg
        tail_dot = np.einsum("pc,pc->p", tail, gout)
        if m == 0:
            continue
        colors = proj.color[rec.rows]                      # (M, 3)
        contrib = rec.alpha * rec.trans[:, :m] * rec.processed
        u = gout @ colors.T                                # (P, M)
        w = contrib * u
        suffix = (w.sum(axis=1) + tail_dot)[:, None] - np.cumsum(w, axis=1)
        denom = np.maximum(1.0 - rec.alpha, 1e-6)
        dalpha = rec.processed * (rec.trans[:, :m] * u - suffix / denom)
        dq = -0.5 * dalpha * rec.alpha

        np.add.at(g_color, rec.rows, contrib.T @ gout)
        np.add.at(g_opacity, rec.rows,
                  (dalpha * rec.gauss_weight * rec.in_front).sum(axis=0))

        inv = proj.inv_cov[rec.rows]
        a, b, c = inv[:, 0, 0][None, :], inv[:, 0, 1][None, :], inv[:, 1, 1][None, :]
        dx, dy = rec.diff[:, :, 0], rec.diff[:, :, 1]
        ex = a * dx + b * dy
        ey = b * dx + c * dy
        np.add.at(g_mean2d, rec.rows, np.stack(
            [(-2.0 * dq * ex).sum(axis=0), (-2.0 * dq * ey).sum(axis=0)], axis=1))
        gxx = (-dq * ex * ex).sum(axis=0)
        gxy = (-dq * ex * ey).sum(axis=0)
        gyy = (-dq * ey * ey).sum(axis=0)
        block = np.empty((m, 2, 2))
        block[:, 0, 0] = gxx
        block[:, 0, 1] = gxy
        block[:, 1, 0] = gxy
        block[:, 1, 1] = gyy
        np.add.at(g_cov2, rec.rows, block)
    return g_color, g_mean2d, g_cov2, g_opacity


def _rotation_partials(u: np.ndarray):
    """d(rotation matrix)/d(unit quaternion component) for each of w,x,y,z."""
    w, x, y, z = u[:, 0], u[:, 1], u[:, 2], u[:, 3]
    o = np.zeros_like(w)

    def mat(rows):
        return 2.0 * np.stack([np.stack(r, axis=1) for r in rows], axis=1)

    pw = mat([[o, -z, y], [z, o, -x], [-y, x, o]])
    px = mat([[o, y, z], [y, -2 * x, -w], [z, w, -2 * x]])
    py = mat([[-2 * y, x, w], [x, o, z], [-w, z, -2 * y]])
    pz = mat([[-2 * z, -w, x], [w, -2 * z, y], [x, y, o]])
    return pw, px, py, pz


def _projection_backward(proj, splats, cam_pose: Pose, cam, config,
                         g_color, g_mean2d, g_cov2, g_opacity):
    """Push screen-space gradients back to world-space splat parameters.

    Returns dense arrays over the gathered splat set (zeros for splats that
    were culled or received no fragments)."""
    n_gather = splats.means.shape[0]
    out = {"mean": np.zeros((n_gather, 3)), "sh_dc": np.zeros((n_gather, 3)),
           "opacity": np.zeros(n_gather), "scale": np.zeros((n_gather, 3)),
           "rotation": np.zeros((n_gather, 4))}
    if len(proj.index) == 0:
        return out

    idx = proj.index
    cam_from_world = geometry.inverse(cam_pose)
    r_cw = geometry.quat_to_matrix(cam_from_world.rotation)
    pc = proj.cam_point
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]

    j = np.zeros((len(idx), 2, 3))
    j[:, 0, 0] = cam.fx / z
    j[:, 0, 2] = -cam.fx * x / (z * z)
    j[:, 1, 1] = cam.fy / z
    j[:, 1, 2] = -cam.fy * y / (z * z)

    quats = splats.rotations[idx]
    norms = np.linalg.norm(quats, axis=1)
    u = quats / norms[:, None]
    rq = geometry.quats_to_matrices(u)
    s = splats.scales[idx]
    b_mat = rq * s[:, None, :]
    sigma3 = b_mat @ np.transpose(b_mat, (0, 2, 1))
    m3 = np.einsum("ij,njk,lk->nil", r_cw, sigma3, r_cw)

    # covariance chain
    g2 = g_cov2
    dj = 2.0 * np.einsum("nab,nbc,ncd->nad", g2, j, m3)
    dm3 = np.einsum("nba,nbc,ncd->nad", j, g2, j)
    n3 = np.einsum("ba,nbc,cd->nad", r_cw, dm3, r_cw)

    # camera-point gradient: direct pinhole term + J-entry dependence
    dpc = np.einsum("nab,na->nb", j, g_mean2d)
    fx_z2, fy_z2 = cam.fx / (z * z), cam.fy / (z * z)
    dpc[:, 0] += dj[:, 0, 2] * (-fx_z2)
    dpc[:, 1] += dj[:, 1, 2] * (-fy_z2)
    dpc[:, 2] += (dj[:, 0, 0] * (-fx_z2) + dj[:, 1, 1] * (-fy_z2)
                  + dj[:, 0, 2] * (2 * cam.fx * x / z ** 3)
                  + dj[:, 1, 2] * (2 * cam.fy * y / z ** 3))
    dmu = dpc @ r_cw

    # SH color chain (clamp gate, then direction back to the world mean)
    gate = (proj.raw_color > 0.0) & (proj.raw_color < 1.0)
    graw = g_color * gate
    degree = min(config.sh_degree_used,
                 int(np.sqrt(splats.sh.shape[1])) - 1 if splats.sh.shape[1] else 0)
    k = (degree + 1) ** 2
    coeff = splats.sh[idx][:, :k, :]
    basis_grad = rasterize.sh_basis_grad(proj.view_dir, degree)
    per_basis = np.einsum("nkc,nc->nk", coeff, graw)
    ddir = np.einsum("nk,nkd->nd", per_basis, basis_grad)
    proj_dir = ddir - proj.view_dir * np.einsum(
        "nd,nd->n", proj.view_dir, ddir)[:, None]
    dmu += proj_dir / proj.view_dist[:, None]

    out["mean"][idx] = dmu
    out["sh_dc"][idx] = rasterize.SH_C0 * graw
    out["opacity"][idx] = g_opacity

    # scale and rotation through the 3D covariance
    rt_n_r = np.einsum("nji,njk,nkl->nil", rq, n3, rq)
    out["scale"][idx] = 2.0 * s * np.einsum("nkk->nk", rt_n_r)

    drq = 2.0 * (n3 @ rq) * (s * s)[:, None, :]
    pw, px, py, pz = _rotation_partials(u)
    du = np.stack([np.einsum("nij,nij->n", drq, p) for p in (pw, px, py, pz)],
                  axis=1)
    du = (du - u * np.einsum("nc,nc->n", u, du)[:, None]) / norms[:, None]
    out["rotation"][idx] = du
    return out


# ---------------------------------------------------------------------------
# Loss / gradient / fit


def _loss_and_grad(field: GaussianField, targets: FrameSequence,
                   ctx: FitContext, config: Optional[FitConfig],
                   want_grad: bool):
    cam = ctx.scene.camera
    if targets.width != cam.width or targets.height != cam.height \
            or len(targets.frames) != len(ctx.times):
        raise FitError("target sequence does not match the render context")
    total = len(ctx.times) * cam.height * cam.width * 3
    loss = 0.0
    grads = None
    for f_i, t in enumerate(ctx.times):
        rgb, splats, proj, records = _forward(ctx, field, t,
                                              keep_records=want_grad)
        diff = rgb - targets.frames[f_i].rgb
        loss += float(np.sum(diff * diff))
        if not want_grad:
            continue
        dl_dout = 2.0 * diff / total
        g_color, g_mean2d, g_cov2, g_opacity = _blend_backward(
            proj, records, ctx.mesh_buffers[t], ctx.config, dl_dout)
        frame_grads = _projection_backward(proj, splats, ctx.cam_poses[t],
                                           cam, ctx.config, g_color, g_mean2d,
                                           g_cov2, g_opacity)
        rows = splats.background_rows
        sliced = {k: v[rows] for k, v in frame_grads.items()}
        if grads is None:
            grads = sliced
        else:
            for key in grads:
                grads[key] += sliced[key]
    loss /= total
    if want_grad and grads is None:
        n = len(field)
        grads = {"mean": np.zeros((n, 3)), "sh_dc": np.zeros((n, 3)),
                 "opacity": np.zeros(n), "scale": np.zeros((n, 3)),
                 "rotation": np.zeros((n, 4))}
    if want_grad and config is not None:
        grads = {k: v for k, v in grads.items() if k in config.optimized_params}
    return loss, grads


def photometric_loss(field: GaussianField, targets: FrameSequence,
                     ctx: FitContext) -> float:
    """Mean squared RGB error of the field rendered in context vs targets."""
    loss, _ = _loss_and_grad(field, targets, ctx, None, want_grad=False)
    return loss


def grad_photometric(field: GaussianField, targets: FrameSequence,
                     ctx: FitContext, config: FitConfig) -> dict[str, np.ndarray]:
    """Analytic gradient of photometric_loss over the optimized parameters,
    with the depth-sort order frozen at the current iterate."""
    _, grads = _loss_and_grad(field, targets, ctx, config, want_grad=True)
    return grads


def fit_field(init: GaussianField, targets: FrameSequence, ctx: FitContext,
              config: FitConfig) -> tuple[GaussianField, list[float]]:
    """Fixed-step gradient descent. Opacity is clamped to [0,1] and scales
    floored at 1e-4 m after each step. Returns the final field and the loss
    history (one entry per iterate, final loss appended)."""
    field = init
    losses = []
    for it in range(config.iterations):
        loss, grads = _loss_and_grad(field, targets, ctx, config, want_grad=True)
        if not np.isfinite(loss):
            raise FitError(f"non-finite loss at iterate {it}")
        losses.append(loss)
        updates = {}
        if "mean" in grads:
            updates["means"] = field.means - config.step_size * grads["mean"]
        if "sh_dc" in grads:
            sh = field.sh.copy()
            sh[:, 0, :] -= config.step_size * grads["sh_dc"]
            updates["sh"] = sh
        if "opacity" in grads:
            updates["opacities"] = np.clip(
                field.opacities - config.step_size * grads["opacity"], 0.0, 1.0)
        if "scale" in grads:
            updates["scales"] = np.maximum(
                field.scales - config.step_size * grads["scale"], 1e-4)
        if "rotation" in grads:
            updates["rotations"] = field.rotations - config.step_size * grads["rotation"]
        field = field.replace_params(**updates)
    final = photometric_loss(field, targets, ctx)
    if not np.isfinite(final):
        raise FitError(f"non-finite loss at iterate {config.iterations}")
    losses.append(final)
    return field, losses


# ---------------------------------------------------------------------------
# Training-pair builders


def lighting_jitter(field: GaussianField, jitter_range: float,
                    seed: int) -> GaussianField:
    """Scale all SH DC coefficients by one factor drawn uniformly from
    [1-range, 1+range]; higher-order coefficients untouched."""
    if jitter_range < 0:
        raise FitError("jitter range must be >= 0")
    if jitter_range == 0 or len(field) == 0:
        return field
    factor = float(np.random.default_rng(seed).uniform(1.0 - jitter_range,
                                                       1.0 + jitter_range))
    sh = field.sh.copy()
    sh[:, 0, :] *= factor
    return field.replace_params(sh=sh)


def build_cycle_pairs(scene: Scene, spec: edit.PerturbationSpec,
                      fit: FitConfig,
                      render_config: RenderConfig = RenderConfig()
                      ) -> list[TrainingPair]:
    """Perturb trajectories, render the perturbed views, refit the background
    field against them under the ORIGINAL trajectories, and render the refit
    field back under the originals.

    condition = the cycle render, target = the clean render, and the
    intermediate perturbed render is recorded on the pair."""
    target = rasterize.render_sequence(scene, render_config)
    perturbed_trajs = edit.perturb_trajectories(scene.trajectories, spec)
    perturbed_scene = scene.replace(trajectories=perturbed_trajs)
    v_tilde = rasterize.render_sequence(perturbed_scene, render_config)

    ctx = FitContext(scene, render_config)
    refit, _ = fit_field(scene.background, v_tilde, ctx, fit)
    v_hat = rasterize.render_sequence(scene, render_config, background=refit)
    return [TrainingPair(condition=v_hat, target=target, provenance="cycle",
                         seed=spec.seed, perturbed=v_tilde)]


def build_mesh_pairs(scene: Scene, p: float, lighting: float, seed: int,
                     render_config: RenderConfig = RenderConfig()
                     ) -> list[TrainingPair]:
    """Mesh-substitution pairs: per asset (seeded, independent), with
    probability p render its mesh instead of its splats; splat fields get a
    lighting jitter. Two variants are emitted: one at p and one at 0.0."""
    if not 0.0 <= p <= 1.0:
        raise FitError(f"substitution probability must be in [0,1], got {p}")
    substitutable = [a for a in scene.assets
                     if a.mesh is not None and a.splats is not None
                     and len(a.splats) > 0]
    if p > 0 and not substitutable:
        raise FitError("no substitutable assets: p > 0 requires an asset "
                       "carrying both splats and a mesh")
    target = rasterize.render_sequence(scene, render_config)

    pairs = []
    for variant_p in (p, 0.0):
        rng = np.random.default_rng(seed)
        chosen = frozenset(a.id for a in substitutable
                           if rng.uniform() < variant_p)
        jit_scene = scene
        if lighting > 0:
            bg_seed = int(rng.integers(2 ** 63))
            new_assets = []
            for a in scene.assets:
                if a.splats is not None and len(a.splats) > 0:
                    a_seed = int(rng.integers(2 ** 63))
                    a = dataclasses.replace(
                        a, splats=lighting_jitter(a.splats, lighting, a_seed))
                new_assets.append(a)
            jit_scene = scene.replace(
                background=lighting_jitter(scene.background, lighting, bg_seed),
                assets=tuple(new_assets))
        condition = rasterize.render_sequence(jit_scene, render_config,
                                              use_mesh_for=chosen)
        pairs.append(TrainingPair(condition=condition, target=target,
                                  provenance="mesh_substitution", seed=seed))
    return pairs


# ---------------------------------------------------------------------------
# Pair persistence (directory layout consumed by the diffusion trainer)


def save_pairs(pairs: Sequence[TrainingPair], out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    index = {"format": PAIRS_FORMAT, "count": len(pairs)}
    with open(os.path.join(out_dir, "pairs.json"), "w", encoding="utf-8") as fh:
        json.dump(index, fh, sort_keys=True, indent=1)
    for i, pair in enumerate(pairs):
        pdir = os.path.join(out_dir, f"pair_{i:04d}")
        os.makedirs(pdir, exist_ok=True)
        save_frames(pair.condition, os.path.join(pdir, "condition"))
        save_frames(pair.target, os.path.join(pdir, "target"))
        if pair.perturbed is not None:
            save_frames(pair.perturbed, os.path.join(pdir, "perturbed"))
        meta = {"provenance": pair.provenance, "seed": pair.seed,
                "has_perturbed": pair.perturbed is not None}
        with open(os.path.join(pdir, "pair.json"), "w", encoding="utf-8") as fh:
            json.dump(meta, fh, sort_keys=True, indent=1)


def load_pairs(in_dir: str) -> list[TrainingPair]:
    with open(os.path.join(in_dir, "pairs.json"), "r", encoding="utf-8") as fh:
        index = json.load(fh)
    if index.get("format") != PAIRS_FORMAT:
        raise FitError(f"unrecognized pairs format {index.get('format')!r}")
    pairs = []
    for i in range(index["count"]):
        pdir = os.path.join(in_dir, f"pair_{i:04d}")
        with open(os.path.join(pdir, "pair.json"), "r", encoding="utf-8") as fh:
            meta = json.load(fh)
        perturbed = None
        if meta.get("has_perturbed"):
            perturbed = load_frames(os.path.join(pdir, "perturbed"))
        pairs.append(TrainingPair(
            condition=load_frames(os.path.join(pdir, "condition")),
            target=load_frames(os.path.join(pdir, "target")),
            provenance=meta["provenance"], seed=meta["seed"],
            perturbed=perturbed))
    return pairs
