"""Evaluation metrics for edited driving scenes.

Four scores compare a generated (edited) video against ground truth:

* ``vims``  - per-instance visual similarity under ego-frame pose matching,
* ``bas``   - background similarity with all dynamic objects masked out,
* ``osr``   - judge-rated success of insertion / removal operations,
* ``fid`` / ``fvd`` - Frechet distances on frame / clip features.

Heavy learned models (image embedders, vision-language judges) are pluggable
seams.  The built-in ``ToyEmbedder`` and the stub judges are deterministic
stand-ins that exercise the exact same code paths; real features can be
precomputed offline and ingested through ``SidecarEmbedder``.

All metrics are deterministic given their providers and inputs.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
import subprocess
import tempfile
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import MetricError
from .geometry import (PoseDistanceWeights, Rect, box_rect, camera_pose,
                       ego_frame_pose, inverse, occlusion_fraction_rects,
                       pose_distance, sample_trajectory)
from .scene.frames import write_png
from .scene.types import (EGO_ID, BoundingBox3D, CameraModel, FrameSequence,
                          InstanceMaskSequence, Pose, Trajectory)


class MetricWarning(UserWarning):
    """Non-fatal metric condition (regularized covariance, excluded scene)."""


# ---------------------------------------------------------------------------
# embedders
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ToyEmbedder:
    """Deterministic image embedder: 4x4 grid of mean RGB (48 dims) plus an
    8-bin gradient-orientation histogram (8 dims), L2-normalized.

    Stands in for a learned image encoder; sensitive to both coarse color
    layout and texture orientation, which is enough for the similarity
    metrics to order "identical" above "perturbed" inputs.
    """

    grid: int = 4
    orientation_bins: int = 8

    @property
    def dim(self) -> int:
        return 3 * self.grid * self.grid + self.orientation_bins

    @property
    def identity(self) -> str:
        return f"toy-grid{self.grid}-ori{self.orientation_bins}"

    def embed(self, rgb: np.ndarray) -> np.ndarray:
        rgb = np.asarray(rgb, dtype=np.float64)
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise MetricError(f"embedder expects (h, w, 3), got {rgb.shape}")
        h, w = rgb.shape[:2]
        cells = np.zeros((self.grid, self.grid, 3))
        if h > 0 and w > 0:
            row_edges = np.linspace(0, h, self.grid + 1).astype(int)
            col_edges = np.linspace(0, w, self.grid + 1).astype(int)
            for i in range(self.grid):
                for j in range(self.grid):
                    cell = rgb[row_edges[i]:row_edges[i + 1],
                               col_edges[j]:col_edges[j + 1]]
                    if cell.size:
                        cells[i, j] = cell.mean(axis=(0, 1))
        hist = np.zeros(self.orientation_bins)
        gray = rgb.mean(axis=2) if rgb.size else np.zeros((0, 0))
        if gray.shape[0] >= 2 and gray.shape[1] >= 2:
            gy, gx = np.gradient(gray)
            mag = np.hypot(gx, gy)
            ang = np.arctan2(gy, gx)  # [-pi, pi]
            bins = np.floor((ang + np.pi) / (2 * np.pi / self.orientation_bins))
            bins = np.clip(bins.astype(int), 0, self.orientation_bins - 1)
            np.add.at(hist, bins.ravel(), mag.ravel())
            total = hist.sum()
            if total > 0:
                hist /= total
        feat = np.concatenate([cells.ravel(), hist])
        return _unit(feat)


def _unit(v: np.ndarray) -> np.ndarray:
    """Normalize to unit length; all-zero input maps to a fixed basis vector
    so degenerate crops still produce a valid cosine."""
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n < 1e-12:
        out = np.zeros_like(v)
        out[0] = 1.0
        return out
    return v / n


def mask_crop(rgb: np.ndarray, mask: np.ndarray) -> Optional[np.ndarray]:
    """Crop to the mask's bounding rectangle with out-of-mask pixels blacked.

    Returns None for an empty mask.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != rgb.shape[:2]:
        raise MetricError(f"mask shape {mask.shape} != image {rgb.shape[:2]}")
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return None
    y0, y1 = ys.min(), ys.max() + 1
    x0, x1 = xs.min(), xs.max() + 1
    out = np.where(mask[..., None], rgb, 0.0)
    return np.ascontiguousarray(out[y0:y1, x0:x1])


# ---------------------------------------------------------------------------
# embedding sidecar (precomputed external features)
# ---------------------------------------------------------------------------

EMBED_TABLE_MAGIC = b"EMBT"
EMBED_TABLE_VERSION = 1


def region_key(rgb: np.ndarray) -> bytes:
    """Content hash of the exact crop bytes (shape header + float64 data)."""
    arr = np.ascontiguousarray(np.asarray(rgb, dtype=np.float64))
    h = hashlib.sha256()
    h.update(struct.pack("<3I", *arr.shape))
    h.update(arr.tobytes())
    return h.digest()


def save_embedding_table(table: Mapping[bytes, np.ndarray], path) -> Path:
    """Binary table of region-key -> feature rows, sorted by key so the file
    bytes are a canonical function of the contents."""
    path = Path(path)
    keys = sorted(table)
    dims = {np.asarray(table[k]).shape for k in keys}
    if len(dims) > 1:
        raise MetricError(f"mixed feature shapes in table: {sorted(dims)}")
    dim = 0 if not keys else int(np.asarray(table[keys[0]]).shape[0])
    with open(path, "wb") as fh:
        fh.write(EMBED_TABLE_MAGIC)
        fh.write(struct.pack("<3I", EMBED_TABLE_VERSION, len(keys), dim))
        for k in keys:
            if len(k) != 32:
                raise MetricError("region keys must be 32-byte sha256 digests")
            fh.write(k)
            fh.write(np.asarray(table[k], dtype="<f8").tobytes())
    return path


def load_embedding_table(path) -> dict[bytes, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != EMBED_TABLE_MAGIC:
        raise MetricError(f"{path}: not an embedding table")
    version, count, dim = struct.unpack("<3I", raw[4:16])
    if version != EMBED_TABLE_VERSION:
        raise MetricError(f"{path}: unsupported table version {version}")
    entry = 32 + 8 * dim
    if len(raw) != 16 + count * entry:
        raise MetricError(f"{path}: truncated embedding table")
    table = {}
    for i in range(count):
        off = 16 + i * entry
        key = raw[off:off + 32]
        vec = np.frombuffer(raw[off + 32:off + entry], dtype="<f8").copy()
        table[key] = vec
    return table


@dataclass(frozen=True)
class SidecarEmbedder:
    """Looks embeddings up in a precomputed table keyed by crop content hash.

    Lets externally computed features (a real image encoder run offline)
    drive the metrics without in-process inference.  Missing regions fall
    back to `fallback` when given, otherwise raise.
    """

    table: Mapping[bytes, np.ndarray]
    fallback: Optional[ToyEmbedder] = None
    label: str = "sidecar"

    @classmethod
    def from_file(cls, path, fallback=None) -> "SidecarEmbedder":
        return cls(load_embedding_table(path), fallback, f"sidecar:{Path(path).name}")

    @property
    def identity(self) -> str:
        return self.label

    def embed(self, rgb: np.ndarray) -> np.ndarray:
        key = region_key(rgb)
        vec = self.table.get(key)
        if vec is not None:
            return _unit(vec)
        if self.fallback is not None:
            return self.fallback.embed(rgb)
        raise MetricError(f"missing-embedding: no table entry for {key.hex()[:16]}")


# ---------------------------------------------------------------------------
# evaluation bundles
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalBundle:
    """Everything one side of a comparison needs: the video, per-frame
    instance masks, trajectories (assets plus ego), 3D boxes, and the camera
    (needed by the projected-box occlusion rule)."""

    video: FrameSequence
    masks: InstanceMaskSequence
    trajectories: Mapping[str, Trajectory]
    boxes: Mapping[str, BoundingBox3D]
    camera: CameraModel
    camera_in_ego: Pose

    def __post_init__(self):
        if len(self.masks) != len(self.video.frames):
            raise MetricError(
                f"mask count {len(self.masks)} != frame count {len(self.video.frames)}")
        if EGO_ID not in self.trajectories:
            raise MetricError("bundle trajectories missing the ego vehicle")
        missing = sorted(set(self.boxes) - set(self.trajectories))
        if missing:
            raise MetricError(f"boxes without trajectories: {missing}")

    def __len__(self) -> int:
        return len(self.video.frames)

    def time(self, idx: int) -> float:
        return float(self.video.times[idx])

    def ego_pose(self, idx: int) -> Pose:
        return sample_trajectory(self.trajectories[EGO_ID], self.time(idx))

    def instance_pose(self, idx: int, instance: str) -> Pose:
        return sample_trajectory(self.trajectories[instance], self.time(idx))

    def cam_from_world(self, idx: int) -> Pose:
        return inverse(camera_pose(self.ego_pose(idx), self.camera_in_ego))


def bundle_from_scene(scene, video: Optional[FrameSequence] = None, *,
                      config=None, threads: int = 1) -> EvalBundle:
    """Build an EvalBundle from a scene, rendering it when no video is given.

    Masks come from the rendered instance-id maps, so a pre-rendered `video`
    must carry them (any FrameSequence produced by render_sequence does).
    """
    if video is None:
        from .rasterize import RenderConfig, render_sequence
        video = render_sequence(scene, config or RenderConfig(), threads=threads)
    return EvalBundle(video=video,
                      masks=InstanceMaskSequence.from_frames(video),
                      trajectories=dict(scene.trajectories),
                      boxes={a.id: a.box for a in scene.assets},
                      camera=scene.camera,
                      camera_in_ego=scene.camera_in_ego)


def _instance_rect(bundle: EvalBundle, idx: int, instance: str) -> Optional[Rect]:
    return box_rect(bundle.boxes[instance], bundle.instance_pose(idx, instance),
                    bundle.cam_from_world(idx), bundle.camera)


def _center_depth(bundle: EvalBundle, idx: int, instance: str) -> float:
    from .geometry import compose, transform_points
    pose = compose(bundle.instance_pose(idx, instance),
                   bundle.boxes[instance].center_pose)
    pc = transform_points(bundle.cam_from_world(idx), pose.translation[None, :])
    return float(pc[0, 2])


def instance_visible(bundle: EvalBundle, idx: int, instance: str,
                     occ_threshold: float = 0.8) -> bool:
    """Visibility rule shared by both sides of VIMS: the instance projects
    into the image, at most `occ_threshold` of its projected rectangle is
    covered by nearer vehicles, and its rendered mask is nonempty."""
    rect = _instance_rect(bundle, idx, instance)
    if rect is None:
        return False
    others = []
    for other in bundle.boxes:
        if other == instance:
            continue
        r = _instance_rect(bundle, idx, other)
        if r is not None:
            others.append((r, _center_depth(bundle, idx, other)))
    occ = occlusion_fraction_rects(rect, _center_depth(bundle, idx, instance), others)
    if occ > occ_threshold:
        return False
    mask = bundle.masks.masks[idx].get(instance)
    return mask is not None and bool(mask.any())


# ---------------------------------------------------------------------------
# VIMS / BAS
# ---------------------------------------------------------------------------

def vims_with_stats(gen: EvalBundle, gt: EvalBundle, embedder=None,
                    w: float = 0.1, occ_threshold: float = 0.8) -> tuple[float, int]:
    """VIMS score plus the number of (frame, instance) pairs skipped because
    the instance was occluded in every ground-truth frame."""
    embedder = embedder or ToyEmbedder()
    weights = PoseDistanceWeights(rotation_weight=w)
    instances = sorted(set(gen.boxes) & set(gt.boxes))
    per_instance = []
    skipped = 0
    for j in instances:
        gt_valid = [k for k in range(len(gt)) if instance_visible(gt, k, j, occ_threshold)]
        gt_poses = {k: ego_frame_pose(gt.ego_pose(k), gt.instance_pose(k, j))
                    for k in gt_valid}
        frame_scores = []
        for t in range(len(gen)):
            if not instance_visible(gen, t, j, occ_threshold):
                continue
            if not gt_valid:
                skipped += 1
                continue
            pose_mod = ego_frame_pose(gen.ego_pose(t), gen.instance_pose(t, j))
            dists = [pose_distance(pose_mod, gt_poses[k], weights) for k in gt_valid]
            k_star = gt_valid[int(np.argmin(dists))]
            crop_gen = mask_crop(gen.video.frames[t].rgb, gen.masks.masks[t][j])
            crop_gt = mask_crop(gt.video.frames[k_star].rgb, gt.masks.masks[k_star][j])
            e1, e2 = embedder.embed(crop_gen), embedder.embed(crop_gt)
            frame_scores.append(float(np.dot(e1, e2)))
        if frame_scores:
            per_instance.append(float(np.mean(frame_scores)))
    if not per_instance:
        raise MetricError("no-valid-pairs: no instance was visible in both bundles")
    return float(np.mean(per_instance)), skipped


def vims(gen: EvalBundle, gt: EvalBundle, embedder=None, w: float = 0.1,
         occ_threshold: float = 0.8) -> float:
    """Visual instance-matching similarity.

    For every instance and generated frame where the instance is visible,
    match the closest non-occluded ground-truth frame by ego-frame pose
    distance, then compare mask-cropped appearance by embedding cosine.
    Per-instance means are averaged into the scene score.
    """
    return vims_with_stats(gen, gt, embedder, w, occ_threshold)[0]


def bas(gen: EvalBundle, gt: EvalBundle, embedder=None, w: float = 0.1) -> float:
    """Background alignment score.

    Per generated frame: find the ground-truth frame with the closest ego
    pose, black out every instance mask on both frames, and take the cosine
    of the full-frame embeddings.  Averaged over generated frames.
    """
    embedder = embedder or ToyEmbedder()
    weights = PoseDistanceWeights(rotation_weight=w)
    if len(gen) == 0 or len(gt) == 0:
        raise MetricError("bas requires nonempty videos on both sides")
    gt_egos = [gt.ego_pose(k) for k in range(len(gt))]
    shape_gen = gen.video.frames[0].rgb.shape[:2]
    shape_gt = gt.video.frames[0].rgb.shape[:2]
    scores = []
    for t in range(len(gen)):
        ego_t = gen.ego_pose(t)
        dists = [pose_distance(ego_t, e, weights) for e in gt_egos]
        k = int(np.argmin(dists))
        bg_gen = np.where(gen.masks.union_foreground(t, shape_gen)[..., None],
                          0.0, gen.video.frames[t].rgb)
        bg_gt = np.where(gt.masks.union_foreground(k, shape_gt)[..., None],
                         0.0, gt.video.frames[k].rgb)
        scores.append(float(np.dot(embedder.embed(bg_gen), embedder.embed(bg_gt))))
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# OSR
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OsrItem:
    """One insertion/removal scene to be rated: the edited video, a textual
    task description, the operation kind, and the instance's 2D box per frame
    (None where the instance does not project)."""

    video: FrameSequence
    task: str
    kind: str  # "insertion" or "removal"
    rects: tuple[Optional[tuple[float, float, float, float]], ...]

    def __post_init__(self):
        if self.kind not in ("insertion", "removal"):
            raise MetricError(f"unknown operation kind {self.kind!r}")
        if len(self.rects) != len(self.video.frames):
            raise MetricError("one rect slot per frame required")


ANNOTATION_COLORS = {"insertion": (0.0, 1.0, 0.0), "removal": (1.0, 0.0, 0.0)}


def osr_frame_indices(n_frames: int, k: int = 5) -> list[int]:
    """K indices uniformly spanning [0, n-1] inclusive, rounded to nearest.

    Duplicates are kept when the video is shorter than k frames.
    """
    if n_frames <= 0 or k <= 0:
        raise MetricError("need at least one frame and k >= 1")
    if k == 1:
        return [0]
    step = (n_frames - 1) / (k - 1)
    return [int(math.floor(i * step + 0.5)) for i in range(k)]


def annotate_frame(rgb: np.ndarray, rect: tuple[float, float, float, float],
                   color: tuple[float, float, float],
                   width: int = 3) -> np.ndarray:
    """Copy of the frame with a `width`-pixel rectangle outline drawn just
    inside the given (x0, y0, x1, y1) bounds, clipped to the image."""
    out = np.array(rgb, dtype=np.float64, copy=True)
    h, w = out.shape[:2]
    x0 = int(np.clip(np.floor(rect[0]), 0, w))
    y0 = int(np.clip(np.floor(rect[1]), 0, h))
    x1 = int(np.clip(np.ceil(rect[2]), 0, w))
    y1 = int(np.clip(np.ceil(rect[3]), 0, h))
    if x0 >= x1 or y0 >= y1:
        return out
    c = np.asarray(color, dtype=np.float64)
    out[y0:min(y0 + width, y1), x0:x1] = c
    out[max(y1 - width, y0):y1, x0:x1] = c
    out[y0:y1, x0:min(x0 + width, x1)] = c
    out[y0:y1, max(x1 - width, x0):x1] = c
    return out


def annotated_frames(item: OsrItem, k: int = 5) -> list[np.ndarray]:
    """The sampled frames with the operation rectangle drawn (green for
    insertion, red for removal); frames without a rect pass through."""
    color = ANNOTATION_COLORS[item.kind]
    frames = []
    for idx in osr_frame_indices(len(item.video.frames), k):
        rgb = item.video.frames[idx].rgb
        rect = item.rects[idx]
        frames.append(annotate_frame(rgb, rect, color) if rect is not None
                      else np.array(rgb, dtype=np.float64, copy=True))
    return frames


def osr_with_flags(items: Sequence[OsrItem], judge, k: int = 5) -> tuple[float, list[str]]:
    """OSR plus a flag string per excluded scene (judge failures and
    out-of-range scores exclude the scene, the run continues)."""
    scores = []
    flags = []
    for i, item in enumerate(items):
        try:
            raw = judge.judge(annotated_frames(item, k), item.task)
        except MetricError as err:
            flags.append(f"scene {i}: {err}")
            continue
        except Exception as err:  # judge is external code; never let it kill the run
            flags.append(f"scene {i}: judge-protocol-failure: {err}")
            continue
        try:
            score = float(raw)
        except (TypeError, ValueError):
            flags.append(f"scene {i}: unparseable-score: {raw!r}")
            continue
        if not np.isfinite(score) or not (1.0 <= score <= 10.0):
            flags.append(f"scene {i}: unparseable-score: {score} outside [1, 10]")
            continue
        scores.append(score)
    for f in flags:
        warnings.warn(f, MetricWarning, stacklevel=2)
    if not scores:
        raise MetricError("no-scored-scenes: every scene was excluded")
    return float(np.mean(scores)), flags


def osr(items: Sequence[OsrItem], judge, k: int = 5) -> float:
    """Operation success rate: mean judge score in [1, 10] over scenes."""
    return osr_with_flags(items, judge, k)[0]


@dataclass(frozen=True)
class ConstantJudge:
    """Stub judge returning a fixed score; useful for plumbing tests."""

    value: float = 7.0

    @property
    def identity(self) -> str:
        return f"constant-{self.value}"

    def judge(self, frames: Sequence[np.ndarray], task: str) -> float:
        return self.value


@dataclass(frozen=True)
class HashingJudge:
    """Deterministic stub judge: score is a pure function of the annotated
    frame bytes and the task string, mapped into [1, 10]."""

    @property
    def identity(self) -> str:
        return "hashing"

    def judge(self, frames: Sequence[np.ndarray], task: str) -> float:
        h = hashlib.sha256(task.encode())
        for f in frames:
            arr = np.ascontiguousarray(np.asarray(f, dtype=np.float64))
            h.update(struct.pack("<3I", *arr.shape))
            h.update(arr.tobytes())
        bucket = int.from_bytes(h.digest()[:4], "little") % 10
        return 1.0 + bucket


def write_judge_query(frames: Sequence[np.ndarray], task: str, dir_path) -> Path:
    """Judge protocol: annotated frames as PNGs plus a structured descriptor;
    the external command answers with one number in [1, 10] on stdout."""
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    names = []
    for i, f in enumerate(frames):
        name = f"frame_{i:02d}.png"
        write_png(np.clip(np.asarray(f, dtype=np.float64), 0.0, 1.0),
                  dir_path / name)
        names.append(name)
    descriptor = {"task": task, "frames": names,
                  "answer_format": "print one number between 1 and 10"}
    path = dir_path / "task.json"
    path.write_text(json.dumps(descriptor, indent=2, sort_keys=True))
    return path


@dataclass(frozen=True)
class CommandJudge:
    """Runs an external command on a written judge query and parses the
    score it prints.  Protocol failures surface as exceptions and make osr
    exclude the scene."""

    command: tuple[str, ...]
    timeout: float = 120.0

    @property
    def identity(self) -> str:
        return "command:" + " ".join(self.command)

    def judge(self, frames: Sequence[np.ndarray], task: str) -> float:
        with tempfile.TemporaryDirectory(prefix="judge-") as tmp:
            manifest = write_judge_query(frames, task, tmp)
            proc = subprocess.run(list(self.command) + [str(manifest)],
                                  capture_output=True, text=True,
                                  timeout=self.timeout, check=True)
        text = proc.stdout.strip()
        try:
            return float(text)
        except ValueError:
            raise MetricError(f"unparseable-score: judge printed {text!r}") from None


# ---------------------------------------------------------------------------
# FID / FVD
# ---------------------------------------------------------------------------

def fit_feature_moments(features: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray, bool]:
    """Mean and unbiased covariance of a feature set.  When the sample count
    is below dim+1 the covariance is regularized with +1e-6*I and flagged."""
    x = np.asarray(list(features), dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise MetricError(f"feature set must be (n, d) with n >= 1, got {x.shape}")
    n, d = x.shape
    mu = x.mean(axis=0)
    if n >= 2:
        cov = np.atleast_2d(np.cov(x, rowvar=False, ddof=1))
    else:
        cov = np.zeros((d, d))
    flagged = n < d + 1
    if flagged:
        cov = cov + 1e-6 * np.eye(d)
        warnings.warn(f"covariance regularized: {n} samples for {d} dims",
                      MetricWarning, stacklevel=2)
    return mu, cov, flagged


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid_from_moments(mu1: np.ndarray, cov1: np.ndarray,
                     mu2: np.ndarray, cov2: np.ndarray) -> float:
    """Frechet distance between two Gaussians given analytic moments."""
    mu1, mu2 = np.atleast_1d(mu1).astype(float), np.atleast_1d(mu2).astype(float)
    cov1 = np.atleast_2d(cov1).astype(float)
    cov2 = np.atleast_2d(cov2).astype(float)
    s1h = _psd_sqrt(cov1)
    inner = s1h @ cov2 @ s1h
    vals = np.linalg.eigvalsh((inner + inner.T) / 2)
    if (vals < -1e-10).any():
        raise MetricError(
            f"non-psd-product: eigenvalue {vals.min():.3e} in sqrt argument")
    tr_sqrt = float(np.sqrt(np.clip(vals, 0.0, None)).sum())
    value = (float(np.sum((mu1 - mu2) ** 2))
             + float(np.trace(cov1)) + float(np.trace(cov2)) - 2.0 * tr_sqrt)
    # exact-zero cases land at tiny negatives through roundoff
    return max(value, 0.0)


def fid(features_a: Sequence[np.ndarray], features_b: Sequence[np.ndarray]) -> float:
    """Frechet distance between two feature sets (mean + unbiased covariance)."""
    mu1, cov1, _ = fit_feature_moments(features_a)
    mu2, cov2, _ = fit_feature_moments(features_b)
    return fid_from_moments(mu1, cov1, mu2, cov2)


def frame_features(seq: FrameSequence, embedder=None) -> list[np.ndarray]:
    embedder = embedder or ToyEmbedder()
    return [embedder.embed(f.rgb) for f in seq.frames]


@dataclass(frozen=True)
class ToyClipEmbedder:
    """Clip-level feature: mean of per-frame embeddings concatenated with the
    mean of their temporal first differences, renormalized.  Single-frame
    clips get a zero difference block, so FVD reduces to frame-feature FID."""

    frame_embedder: ToyEmbedder = field(default_factory=ToyEmbedder)

    @property
    def identity(self) -> str:
        return f"toy-clip({self.frame_embedder.identity})"

    def embed_clip(self, seq: FrameSequence) -> np.ndarray:
        es = np.stack([self.frame_embedder.embed(f.rgb) for f in seq.frames])
        mean_e = es.mean(axis=0)
        diff = es[1:] - es[:-1]
        mean_d = diff.mean(axis=0) if len(es) > 1 else np.zeros_like(mean_e)
        return _unit(np.concatenate([mean_e, mean_d]))


def fvd(gen: Sequence[FrameSequence], gt: Sequence[FrameSequence],
        clip_embedder=None) -> float:
    """Frechet distance on clip-level features of whole videos."""
    clip_embedder = clip_embedder or ToyClipEmbedder()
    return fid([clip_embedder.embed_clip(s) for s in gen],
               [clip_embedder.embed_clip(s) for s in gt])
