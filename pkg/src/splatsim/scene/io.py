"""On-disk scene format: UTF-8 JSON manifest + binary blobs with checksums.

Byte stability: the manifest is JSON with sorted keys and Python's shortest
round-trip float repr, so identical scenes serialize to identical bytes and
float64 values survive a round trip exactly. Bulk arrays (splats, meshes)
live in little-endian binary blobs referenced by relative path + sha256.

Splat blob layout (little-endian):
    magic b"GSPL" | u32 version=1 | u32 count | u32 coeffs_per_channel
    then count records of float32: mean(3) scale(3) quat(4) opacity(1) sh(3K)
Mesh blob layout:
    magic b"MESH" | u32 version=1 | u32 n_vertices | u32 n_triangles
    then float32 vertices (3V) | u32 indices (3T) | float32 colors (3V)
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Optional

import numpy as np

from ..errors import BlobChecksumError, MissingFileError, SceneFormatError
from .types import (EGO_ID, BoundingBox3D, CameraModel, GaussianField, Pose,
                    RigidAsset, Scene, TriangleMesh, Trajectory)

MANIFEST_FORMAT = "splatsim-scene/1"
SPLAT_MAGIC = b"GSPL"
MESH_MAGIC = b"MESH"
BLOB_VERSION = 1


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _dump_json(obj: Any) -> bytes:
    return (json.dumps(obj, sort_keys=True, indent=1) + "\n").encode("utf-8")


def _pose_to_json(p: Pose) -> dict:
    return {"rotation": [float(v) for v in p.rotation],
            "translation": [float(v) for v in p.translation]}


def _pose_from_json(obj: dict, path: str) -> Pose:
    try:
        return Pose(np.array(obj["rotation"], dtype=np.float64),
                    np.array(obj["translation"], dtype=np.float64))
    except (KeyError, TypeError, ValueError) as exc:
        raise SceneFormatError(f"bad pose: {exc}", path) from exc


def encode_splat_blob(field: GaussianField) -> bytes:
    n = len(field)
    k = field.sh.shape[1]
    header = SPLAT_MAGIC + struct.pack("<III", BLOB_VERSION, n, k)
    records = np.concatenate([
        field.means.astype("<f4"),
        field.scales.astype("<f4"),
        field.rotations.astype("<f4"),
        field.opacities.astype("<f4")[:, None],
        field.sh.reshape(n, 3 * k, order="C").astype("<f4"),
    ], axis=1)
    return header + records.tobytes(order="C")


def decode_splat_blob(data: bytes, frame: str, allow_empty: bool,
                      path: str = "splats") -> GaussianField:
    if len(data) < 16 or data[:4] != SPLAT_MAGIC:
        raise SceneFormatError("not a splat blob", path)
    version, n, k = struct.unpack("<III", data[4:16])
    if version != BLOB_VERSION:
        raise SceneFormatError(f"unsupported splat blob version {version}", path)
    rec_len = 3 + 3 + 4 + 1 + 3 * k
    body = np.frombuffer(data, dtype="<f4", offset=16)
    if body.size != n * rec_len:
        raise SceneFormatError(f"splat blob size mismatch ({body.size} floats "
                               f"for {n} records of {rec_len})", path)
    rec = body.reshape(n, rec_len).astype(np.float64)
    return GaussianField(rec[:, 0:3], rec[:, 3:6], rec[:, 6:10], rec[:, 10],
                         rec[:, 11:].reshape(n, k, 3), frame=frame,
                         allow_empty=allow_empty)


def encode_mesh_blob(mesh: TriangleMesh) -> bytes:
    nv = mesh.vertices.shape[0]
    nt = mesh.triangles.shape[0]
    return (MESH_MAGIC + struct.pack("<III", BLOB_VERSION, nv, nt)
            + mesh.vertices.astype("<f4").tobytes(order="C")
            + mesh.triangles.astype("<u4").tobytes(order="C")
            + mesh.vertex_colors.astype("<f4").tobytes(order="C"))


def decode_mesh_blob(data: bytes, path: str = "mesh") -> TriangleMesh:
    if len(data) < 16 or data[:4] != MESH_MAGIC:
        raise SceneFormatError("not a mesh blob", path)
    version, nv, nt = struct.unpack("<III", data[4:16])
    if version != BLOB_VERSION:
        raise SceneFormatError(f"unsupported mesh blob version {version}", path)
    expect = 16 + 4 * (3 * nv) + 4 * (3 * nt) + 4 * (3 * nv)
    if len(data) != expect:
        raise SceneFormatError("mesh blob size mismatch", path)
    off = 16
    verts = np.frombuffer(data, dtype="<f4", count=3 * nv, offset=off).reshape(nv, 3)
    off += 12 * nv
    tris = np.frombuffer(data, dtype="<u4", count=3 * nt, offset=off).reshape(nt, 3)
    off += 12 * nt
    colors = np.frombuffer(data, dtype="<f4", count=3 * nv, offset=off).reshape(nv, 3)
    return TriangleMesh(verts.astype(np.float64), tris.astype(np.int32),
                        colors.astype(np.float64))


def _manifest_path(path: Path) -> Path:
    path = Path(path)
    if path.suffix == ".json":
        return path
    return path / "scene.json"


def save_scene(scene: Scene, path) -> None:
    """Write the manifest and its blobs; identical scenes give identical bytes."""
    manifest_path = _manifest_path(path)
    root = manifest_path.parent
    root.mkdir(parents=True, exist_ok=True)
    blobs: dict[str, bytes] = {}

    def blob_ref(name: str, data: bytes) -> dict:
        blobs[name] = data
        return {"path": name, "sha256": _sha256(data)}

    def field_to_json(field: Optional[GaussianField], name: str) -> Optional[dict]:
        if field is None:
            return None
        entry: dict[str, Any] = {"frame": field.frame, "empty": len(field) == 0}
        entry["splats"] = None if len(field) == 0 else blob_ref(
            f"{name}.splats.bin", encode_splat_blob(field))
        return entry

    assets_json = []
    for i, asset in enumerate(scene.assets):
        stem = f"asset{i:03d}"
        entry = {
            "id": asset.id,
            "klass": asset.klass,
            "box": {"size": [float(v) for v in asset.box.size],
                    "center_pose": _pose_to_json(asset.box.center_pose)},
            "splats": field_to_json(asset.splats, stem),
            "mesh": None if asset.mesh is None else blob_ref(
                f"{stem}.mesh.bin", encode_mesh_blob(asset.mesh)),
            "lidar_point_counts": (None if asset.lidar_point_counts is None
                                   else list(asset.lidar_point_counts)),
        }
        assets_json.append(entry)

    trajectories_json = {}
    for key in sorted(scene.trajectories):
        traj = scene.trajectories[key]
        trajectories_json[key] = {
            "times": [float(t) for t in traj.times],
            "poses": [[float(v) for v in p.rotation] + [float(v) for v in p.translation]
                      for p in traj.poses],
        }

    manifest = {
        "format": MANIFEST_FORMAT,
        "scene_id": scene.scene_id,
        "timeline": [float(t) for t in scene.timeline],
        "camera": {"fx": scene.camera.fx, "fy": scene.camera.fy,
                   "cx": scene.camera.cx, "cy": scene.camera.cy,
                   "width": scene.camera.width, "height": scene.camera.height,
                   "near": scene.camera.near, "far": scene.camera.far},
        "camera_in_ego": _pose_to_json(scene.camera_in_ego),
        "background": field_to_json(scene.background, "background"),
        "assets": assets_json,
        "trajectories": trajectories_json,
    }

    for name, data in sorted(blobs.items()):
        (root / name).write_bytes(data)
    manifest_path.write_bytes(_dump_json(manifest))


def _read_blob(root: Path, ref: dict, path: str) -> bytes:
    try:
        rel, checksum = ref["path"], ref["sha256"]
    except (KeyError, TypeError) as exc:
        raise SceneFormatError("blob reference needs path and sha256", path) from exc
    blob_path = root / rel
    if not blob_path.exists():
        raise MissingFileError(f"{path}: missing blob {blob_path}")
    data = blob_path.read_bytes()
    if _sha256(data) != checksum:
        raise BlobChecksumError(f"{path}: checksum mismatch for {rel}")
    return data


def _field_from_json(obj: Optional[dict], root: Path, path: str,
                     default_frame: str) -> Optional[GaussianField]:
    if obj is None:
        return None
    frame = obj.get("frame", default_frame)
    empty = bool(obj.get("empty", False))
    ref = obj.get("splats")
    if ref is None:
        if not empty:
            raise SceneFormatError("non-empty field without splat blob", path)
        return GaussianField.empty(frame=frame)
    return decode_splat_blob(_read_blob(root, ref, path), frame=frame,
                             allow_empty=empty, path=path)


def load_scene(path) -> Scene:
    manifest_path = _manifest_path(path)
    if not manifest_path.exists():
        raise MissingFileError(f"no scene manifest at {manifest_path}")
    root = manifest_path.parent
    try:
        manifest = json.loads(manifest_path.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"manifest is not valid JSON: {exc}", str(manifest_path))
    if manifest.get("format") != MANIFEST_FORMAT:
        raise SceneFormatError(f"unsupported manifest format "
                               f"{manifest.get('format')!r}", "format")

    def require(obj: dict, key: str, path: str):
        if key not in obj:
            raise SceneFormatError("missing required key", f"{path}.{key}")
        return obj[key]

    cam_json = require(manifest, "camera", "manifest")
    try:
        camera = CameraModel(fx=float(cam_json["fx"]), fy=float(cam_json["fy"]),
                             cx=float(cam_json["cx"]), cy=float(cam_json["cy"]),
                             width=int(cam_json["width"]), height=int(cam_json["height"]),
                             near=float(cam_json["near"]), far=float(cam_json["far"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise SceneFormatError(f"bad camera: {exc}", "camera") from exc

    background = _field_from_json(require(manifest, "background", "manifest"),
                                  root, "background", "world")
    if background is None:
        raise SceneFormatError("background entry required", "background")

    assets = []
    for i, entry in enumerate(require(manifest, "assets", "manifest")):
        path_i = f"assets[{i}]"
        try:
            box_json = entry["box"]
            box = BoundingBox3D(np.array(box_json["size"], dtype=np.float64),
                                _pose_from_json(box_json["center_pose"],
                                                f"{path_i}.box.center_pose"))
            counts = entry.get("lidar_point_counts")
            assets.append(RigidAsset(
                id=str(entry["id"]), klass=str(entry["klass"]), box=box,
                splats=_field_from_json(entry.get("splats"), root,
                                        f"{path_i}.splats", "asset_local"),
                mesh=(None if entry.get("mesh") is None else decode_mesh_blob(
                    _read_blob(root, entry["mesh"], f"{path_i}.mesh"), f"{path_i}.mesh")),
                lidar_point_counts=None if counts is None else tuple(counts)))
        except SceneFormatError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise SceneFormatError(f"bad asset entry: {exc}", path_i) from exc

    trajectories = {}
    for key, tj in require(manifest, "trajectories", "manifest").items():
        tpath = f"trajectories[{key}]"
        try:
            poses = tuple(Pose(np.array(row[:4], dtype=np.float64),
                               np.array(row[4:7], dtype=np.float64))
                          for row in tj["poses"])
            trajectories[key] = Trajectory(np.array(tj["times"], dtype=np.float64), poses)
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise SceneFormatError(f"bad trajectory: {exc}", tpath) from exc

    return Scene(background=background, assets=tuple(assets),
                 trajectories=trajectories, camera=camera,
                 camera_in_ego=_pose_from_json(require(manifest, "camera_in_ego",
                                                       "manifest"), "camera_in_ego"),
                 timeline=np.array(require(manifest, "timeline", "manifest"),
                                   dtype=np.float64),
                 scene_id=str(manifest.get("scene_id", "scene")))


def scene_bytes(scene: Scene) -> bytes:
    """Canonical serialized form (manifest + sorted blobs), for hashing/tests."""
    import io as _io
    import tempfile
    with tempfile.TemporaryDirectory() as tmp:
        save_scene(scene, Path(tmp) / "scene.json")
        buf = _io.BytesIO()
        for f in sorted(Path(tmp).iterdir()):
            buf.write(f.name.encode() + b"\0" + f.read_bytes() + b"\0")
        return buf.getvalue()


EGO_KEY = EGO_ID
