"""Declarative scene manipulation: speed changes, lane shifts, heading
changes, insertion, removal, seeded trajectory perturbation, and the
separating-axis conflict check.

All operations are pure: they return new trajectories/scenes and never mutate
their inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from . import geometry
from .errors import EditError
from .scene.types import (EGO_ID, Pose, RigidAsset, Scene, Trajectory)


# ---------------------------------------------------------------------------
# Command types


@dataclass(frozen=True)
class SpeedChange:
    target: str
    factor: float
    window: tuple[float, float]


@dataclass(frozen=True)
class LaneShift:
    target: str
    offset: float          # meters, +left in the target's local frame
    ramp: float = 0.0      # seconds to reach the full offset


@dataclass(frozen=True)
class HeadingChange:
    target: str
    yaw_delta: float       # radians, about world +z
    window: tuple[float, float]


@dataclass(frozen=True)
class Insert:
    asset: RigidAsset
    trajectory: Trajectory


@dataclass(frozen=True)
class Remove:
    target: str


@dataclass(frozen=True)
class PerturbationSpec:
    lateral_range: float = 0.0    # meters
    vertical_range: float = 0.0   # meters
    heading_range: float = 0.0    # radians
    seed: int = 0

    def __post_init__(self):
        if min(self.lateral_range, self.vertical_range, self.heading_range) < 0:
            raise EditError("perturbation ranges must be >= 0")


@dataclass(frozen=True)
class Perturb:
    spec: PerturbationSpec
    include_ego: bool = False


Command = Union[SpeedChange, LaneShift, HeadingChange, Insert, Remove, Perturb]


@dataclass(frozen=True)
class EditScript:
    commands: tuple[Command, ...]


# ---------------------------------------------------------------------------
# Trajectory-level operations


def speed_change(traj: Trajectory, factor: float,
                 window: tuple[float, float]) -> Trajectory:
    """Traverse the window portion of the path at factor x original speed.

    Output pose at time t is the original pose at t0 + factor*(t - t0),
    clamped at the window end; past the window the path continues from the
    reached point with original timing. Sample times are preserved."""
    t0, t1 = float(window[0]), float(window[1])
    if t1 <= t0:
        raise EditError(f"degenerate window [{t0}, {t1}]")
    if factor <= 0:
        raise EditError(f"speed factor must be > 0, got {factor}")
    tau_end = min(t0 + factor * (t1 - t0), t1)
    poses = []
    for t in traj.times:
        if t < t0:
            tau = t
        elif t <= t1:
            tau = min(t0 + factor * (t - t0), t1)
        else:
            tau = tau_end + (t - t1)
        poses.append(geometry.sample_trajectory(traj, float(tau)))
    return Trajectory(traj.times, tuple(poses))


def lane_shift(traj: Trajectory, offset: float, ramp: float = 0.0) -> Trajectory:
    """Translate each pose by s(t)*offset along its own local +y (left) axis.

    s(t) ramps linearly from 0 to 1 over the first `ramp` seconds of the
    trajectory and then holds 1; headings are unchanged."""
    if ramp < 0:
        raise EditError(f"ramp must be >= 0, got {ramp}")
    t_first = traj.times[0]
    poses = []
    for t, pose in zip(traj.times, traj.poses):
        s = 1.0 if ramp == 0 else min(max((t - t_first) / ramp, 0.0), 1.0)
        left = geometry.quat_to_matrix(pose.rotation) @ np.array([0.0, s * offset, 0.0])
        poses.append(Pose(pose.rotation, pose.translation + left))
    return Trajectory(traj.times, tuple(poses))


def heading_change(traj: Trajectory, yaw_delta: float,
                   window: tuple[float, float]) -> Trajectory:
    """Rigidly rotate the path from the window start onward by yaw_delta
    about the world +z axis through the window-start position."""
    t0, t1 = float(window[0]), float(window[1])
    if t1 <= t0:
        raise EditError(f"degenerate window [{t0}, {t1}]")
    if yaw_delta == 0.0:
        return traj
    pivot = geometry.sample_trajectory(traj, t0).translation
    spin = Pose.from_yaw(yaw_delta)
    rz = geometry.quat_to_matrix(spin.rotation)
    poses = []
    for t, pose in zip(traj.times, traj.poses):
        if t < t0:
            poses.append(pose)
        else:
            poses.append(Pose(
                geometry.quat_normalize(
                    geometry.quat_multiply(spin.rotation, pose.rotation)),
                pivot + rz @ (pose.translation - pivot)))
    return Trajectory(traj.times, tuple(poses))


def _translate_vertical(traj: Trajectory, dz: float) -> Trajectory:
    if dz == 0.0:
        return traj
    lift = np.array([0.0, 0.0, dz])
    return Trajectory(traj.times, tuple(
        Pose(p.rotation, p.translation + lift) for p in traj.poses))


def perturb_trajectories(trajs: Mapping[str, Trajectory],
                         spec: PerturbationSpec) -> dict[str, Trajectory]:
    """Apply one uniformly drawn (lateral, vertical, heading) delta to each
    trajectory. Draw order follows sorted ids, so equal mappings perturb
    identically regardless of insertion order."""
    rng = np.random.default_rng(spec.seed)
    out = dict(trajs)
    for tid in sorted(trajs):
        tr = trajs[tid]
        d_lat = float(rng.uniform(-spec.lateral_range, spec.lateral_range))
        d_vert = float(rng.uniform(-spec.vertical_range, spec.vertical_range))
        d_head = float(rng.uniform(-spec.heading_range, spec.heading_range))
        tr = lane_shift(tr, d_lat, 0.0)
        tr = _translate_vertical(tr, d_vert)
        if d_head != 0.0 and len(tr.times) > 1:
            tr = heading_change(tr, d_head, (tr.times[0], tr.times[-1]))
        out[tid] = tr
    return out


# ---------------------------------------------------------------------------
# Scene-level operations


def remove_asset(scene: Scene, asset_id: str) -> Scene:
    if scene.asset(asset_id) is None:
        raise EditError(f"unknown asset {asset_id!r}")
    assets = tuple(a for a in scene.assets if a.id != asset_id)
    trajs = {k: v for k, v in scene.trajectories.items() if k != asset_id}
    return scene.replace(assets=assets, trajectories=trajs)


def insert_asset(scene: Scene, asset: RigidAsset, traj: Trajectory
                 ) -> tuple[Scene, list[tuple[float, str, str]]]:
    """Add an asset with its trajectory; returns the new scene together with
    the re-run conflict report."""
    if asset.id == EGO_ID or scene.asset(asset.id) is not None:
        raise EditError(f"duplicate asset id {asset.id!r}")
    trajs = dict(scene.trajectories)
    trajs[asset.id] = traj
    new_scene = scene.replace(assets=scene.assets + (asset,), trajectories=trajs)
    return new_scene, check_conflicts(new_scene)


def _obb_overlap(pose_a: Pose, half_a: np.ndarray,
                 pose_b: Pose, half_b: np.ndarray) -> bool:
    """Separating-axis test for two oriented boxes (15 candidate axes)."""
    ra_m = geometry.quat_to_matrix(pose_a.rotation)
    rb_m = geometry.quat_to_matrix(pose_b.rotation)
    d = pose_b.translation - pose_a.translation
    axes = [ra_m[:, k] for k in range(3)] + [rb_m[:, k] for k in range(3)]
    for i in range(3):
        for j in range(3):
            axes.append(np.cross(ra_m[:, i], rb_m[:, j]))
    for axis in axes:
        n = np.linalg.norm(axis)
        if n < 1e-9:  # parallel edges: cross product degenerate, axis redundant
            continue
        axis = axis / n
        reach_a = float(np.sum(half_a * np.abs(axis @ ra_m)))
        reach_b = float(np.sum(half_b * np.abs(axis @ rb_m)))
        if abs(float(axis @ d)) > reach_a + reach_b + 1e-12:
            return False
    return True


def check_conflicts(scene: Scene) -> list[tuple[float, str, str]]:
    """Report oriented-box overlaps for every timeline instant and asset
    pair, sorted by (t, id_a, id_b) with id_a < id_b."""
    out = []
    assets = scene.assets
    for t in scene.timeline:
        world_boxes = {}
        for a in assets:
            pose = geometry.sample_trajectory(scene.trajectories[a.id], float(t))
            world_boxes[a.id] = geometry.compose(pose, a.box.center_pose)
        for i in range(len(assets)):
            for j in range(i + 1, len(assets)):
                a, b = assets[i], assets[j]
                if _obb_overlap(world_boxes[a.id], a.box.size / 2.0,
                                world_boxes[b.id], b.box.size / 2.0):
                    id_a, id_b = sorted((a.id, b.id))
                    out.append((float(t), id_a, id_b))
    out.sort(key=lambda r: (r[0], r[1], r[2]))
    return out


# ---------------------------------------------------------------------------
# Script application


def _window_in_timeline(window, scene: Scene) -> bool:
    lo, hi = scene.timeline[0], scene.timeline[-1]
    return lo - 1e-9 <= window[0] and window[1] <= hi + 1e-9


def _require_target(scene: Scene, target: str) -> None:
    if target != EGO_ID and scene.asset(target) is None:
        raise EditError(f"unknown asset {target!r}")


def _with_trajectory(scene: Scene, target: str, traj: Trajectory) -> Scene:
    trajs = dict(scene.trajectories)
    trajs[target] = traj
    return scene.replace(trajectories=trajs)


def apply_edit_script(scene: Scene, script: EditScript,
                      conflict_log: Optional[list] = None) -> Scene:
    """Apply commands in order; `conflict_log` (if given) collects the
    conflict reports produced by Insert commands."""
    for cmd in script.commands:
        if isinstance(cmd, SpeedChange):
            _require_target(scene, cmd.target)
            if not _window_in_timeline(cmd.window, scene):
                raise EditError(f"window {cmd.window} outside scene timeline")
            traj = speed_change(scene.trajectories[cmd.target], cmd.factor,
                                cmd.window)
            scene = _with_trajectory(scene, cmd.target, traj)
        elif isinstance(cmd, LaneShift):
            _require_target(scene, cmd.target)
            traj = lane_shift(scene.trajectories[cmd.target], cmd.offset,
                              cmd.ramp)
            scene = _with_trajectory(scene, cmd.target, traj)
        elif isinstance(cmd, HeadingChange):
            _require_target(scene, cmd.target)
            if not _window_in_timeline(cmd.window, scene):
                raise EditError(f"window {cmd.window} outside scene timeline")
            traj = heading_change(scene.trajectories[cmd.target],
                                  cmd.yaw_delta, cmd.window)
            scene = _with_trajectory(scene, cmd.target, traj)
        elif isinstance(cmd, Insert):
            scene, conflicts = insert_asset(scene, cmd.asset, cmd.trajectory)
            if conflict_log is not None:
                conflict_log.extend(conflicts)
        elif isinstance(cmd, Remove):
            scene = remove_asset(scene, cmd.target)
        elif isinstance(cmd, Perturb):
            targets = {k: v for k, v in scene.trajectories.items()
                       if cmd.include_ego or k != EGO_ID}
            perturbed = perturb_trajectories(targets, cmd.spec)
            trajs = dict(scene.trajectories)
            trajs.update(perturbed)
            scene = scene.replace(trajectories=trajs)
        else:
            raise EditError(f"unsupported command {type(cmd).__name__}")
    return scene


# ---------------------------------------------------------------------------
# Text grammar
#
# One command per line, `#` starts a comment:
#
#   speed_change target=<id|ego> factor=<float> window=<t0:t1>
#   lane_shift target=<id|ego> offset=<meters> [ramp=<seconds>]
#   heading_change target=<id|ego> yaw_delta_deg=<degrees> window=<t0:t1>
#   insert from=<scene.json> asset=<id> [dx=<m>] [dy=<m>] [dz=<m>]
#   remove target=<id>
#   perturb [lateral=<m>] [vertical=<m>] [heading_deg=<deg>] [seed=<int>]
#           [include_ego=true|false]
#
# Angles cross this boundary in degrees and are converted to radians here.


def _parse_kv(parts: Sequence[str], line_no: int) -> dict[str, str]:
    args = {}
    for item in parts:
        if "=" not in item:
            raise EditError(f"line {line_no}: expected key=value, got {item!r}")
        key, value = item.split("=", 1)
        args[key] = value
    return args


def _need(args: dict, key: str, line_no: int) -> str:
    if key not in args:
        raise EditError(f"line {line_no}: missing required argument {key!r}")
    return args[key]


def _parse_window(text: str, line_no: int) -> tuple[float, float]:
    try:
        lo, hi = text.split(":")
        return float(lo), float(hi)
    except ValueError as exc:
        raise EditError(f"line {line_no}: window must be t0:t1, got {text!r}") from exc


def _parse_float(text: str, key: str, line_no: int) -> float:
    try:
        return float(text)
    except ValueError as exc:
        raise EditError(f"line {line_no}: {key} must be a number, got {text!r}") from exc


def parse_edit_script(text: str, base_dir: Optional[str] = None) -> EditScript:
    """Parse the structured-text grammar above. Insert commands load the
    referenced scene file (relative paths resolve against base_dir)."""
    import os

    from .scene.io import load_scene

    commands: list[Command] = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        name, args = parts[0], _parse_kv(parts[1:], line_no)
        if name == "speed_change":
            commands.append(SpeedChange(
                target=_need(args, "target", line_no),
                factor=_parse_float(_need(args, "factor", line_no), "factor", line_no),
                window=_parse_window(_need(args, "window", line_no), line_no)))
        elif name == "lane_shift":
            commands.append(LaneShift(
                target=_need(args, "target", line_no),
                offset=_parse_float(_need(args, "offset", line_no), "offset", line_no),
                ramp=_parse_float(args.get("ramp", "0"), "ramp", line_no)))
        elif name == "heading_change":
            deg = _parse_float(_need(args, "yaw_delta_deg", line_no),
                               "yaw_delta_deg", line_no)
            commands.append(HeadingChange(
                target=_need(args, "target", line_no),
                yaw_delta=math.radians(deg),
                window=_parse_window(_need(args, "window", line_no), line_no)))
        elif name == "insert":
            path = _need(args, "from", line_no)
            if base_dir is not None and not os.path.isabs(path):
                path = os.path.join(base_dir, path)
            source = load_scene(path)
            asset_id = _need(args, "asset", line_no)
            asset = source.asset(asset_id)
            if asset is None:
                raise EditError(
                    f"line {line_no}: asset {asset_id!r} not found in {path}")
            traj = source.trajectories[asset_id]
            shift = np.array([
                _parse_float(args.get("dx", "0"), "dx", line_no),
                _parse_float(args.get("dy", "0"), "dy", line_no),
                _parse_float(args.get("dz", "0"), "dz", line_no)])
            if np.any(shift != 0.0):
                traj = Trajectory(traj.times, tuple(
                    Pose(p.rotation, p.translation + shift) for p in traj.poses))
            commands.append(Insert(asset=asset, trajectory=traj))
        elif name == "remove":
            commands.append(Remove(target=_need(args, "target", line_no)))
        elif name == "perturb":
            flag = args.get("include_ego", "false").lower()
            if flag not in ("true", "false"):
                raise EditError(f"line {line_no}: include_ego must be true or false")
            commands.append(Perturb(
                spec=PerturbationSpec(
                    lateral_range=_parse_float(args.get("lateral", "0"), "lateral", line_no),
                    vertical_range=_parse_float(args.get("vertical", "0"), "vertical", line_no),
                    heading_range=math.radians(
                        _parse_float(args.get("heading_deg", "0"), "heading_deg", line_no)),
                    seed=int(args.get("seed", "0"))),
                include_ego=flag == "true"))
        else:
            raise EditError(f"line {line_no}: unknown command {name!r}")
    return EditScript(commands=tuple(commands))


def load_edit_script(path: str) -> EditScript:
    import os
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    return parse_edit_script(text, base_dir=os.path.dirname(os.path.abspath(path)))
