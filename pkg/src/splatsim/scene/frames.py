"""FrameSequence persistence: directory of binary blobs plus an index file.

Layout: <dir>/index.json plus, per frame i, frame_%04d.rgb.bin (float32
H*W*3), frame_%04d.depth.bin (float32 H*W), frame_%04d.ids.bin (int32 H*W,
-1 = background, otherwise an index into the shared id table). All blobs
are checksummed in the index. PNG export is provided for eyeballing only;
the binary blobs are the format of record.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from ..errors import BlobChecksumError, MissingFileError, SceneFormatError
from .types import FrameBuffer, FrameSequence

FRAMES_FORMAT = "splatsim-frames/1"


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def save_frames(seq: FrameSequence, dir_path) -> None:
    root = Path(dir_path)
    root.mkdir(parents=True, exist_ok=True)
    if seq.frames:
        id_table = seq.frames[0].id_table
        for fb in seq.frames:
            if fb.id_table != id_table:
                raise SceneFormatError("frames must share one id table to persist",
                                       "frames")
    else:
        id_table = ()

    entries = []
    for i, fb in enumerate(seq.frames):
        parts = {}
        for kind, arr in (("rgb", fb.rgb.astype("<f4")),
                          ("depth", fb.depth.astype("<f4")),
                          ("ids", fb.instance_ids.astype("<i4"))):
            name = f"frame_{i:04d}.{kind}.bin"
            data = arr.tobytes(order="C")
            (root / name).write_bytes(data)
            parts[kind] = {"path": name, "sha256": _sha256(data)}
        entries.append(parts)

    index = {
        "format": FRAMES_FORMAT,
        "width": seq.width if seq.frames else 0,
        "height": seq.height if seq.frames else 0,
        "times": [float(t) for t in seq.times],
        "id_table": list(id_table),
        "frames": entries,
    }
    (root / "index.json").write_bytes(
        (json.dumps(index, sort_keys=True, indent=1) + "\n").encode("utf-8"))


def load_frames(dir_path) -> FrameSequence:
    root = Path(dir_path)
    index_path = root / "index.json"
    if not index_path.exists():
        raise MissingFileError(f"no frame index at {index_path}")
    index = json.loads(index_path.read_text("utf-8"))
    if index.get("format") != FRAMES_FORMAT:
        raise SceneFormatError(f"unsupported frames format {index.get('format')!r}",
                               str(index_path))
    h, w = int(index["height"]), int(index["width"])
    id_table = tuple(index["id_table"])

    def read(ref: dict, dtype: str, count: int) -> np.ndarray:
        path = root / ref["path"]
        if not path.exists():
            raise MissingFileError(f"missing frame blob {path}")
        data = path.read_bytes()
        if _sha256(data) != ref["sha256"]:
            raise BlobChecksumError(f"checksum mismatch for {path}")
        arr = np.frombuffer(data, dtype=dtype)
        if arr.size != count:
            raise SceneFormatError("frame blob size mismatch", str(path))
        return arr

    frames = []
    for entry in index["frames"]:
        rgb = read(entry["rgb"], "<f4", h * w * 3).reshape(h, w, 3).astype(np.float64)
        depth = read(entry["depth"], "<f4", h * w).reshape(h, w).astype(np.float64)
        ids = read(entry["ids"], "<i4", h * w).reshape(h, w).astype(np.int32)
        frames.append(FrameBuffer(rgb, depth, ids, id_table))
    return FrameSequence(tuple(frames), np.array(index["times"], dtype=np.float64))


def write_png(rgb: np.ndarray, path) -> Path:
    """Write one [0,1] float RGB array as an 8-bit PNG."""
    from PIL import Image

    path = Path(path)
    rgb8 = np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(rgb8, mode="RGB").save(path)
    return path


def export_png(seq: FrameSequence, dir_path, include_depth: bool = False) -> list[Path]:
    """Write 8-bit PNGs for inspection; returns the written paths."""
    from PIL import Image

    root = Path(dir_path)
    root.mkdir(parents=True, exist_ok=True)
    written = []
    for i, fb in enumerate(seq.frames):
        written.append(write_png(fb.rgb, root / f"frame_{i:04d}.png"))
        if include_depth:
            finite = fb.depth[np.isfinite(fb.depth)]
            hi = float(finite.max()) if finite.size else 1.0
            depth8 = np.clip(fb.depth / hi if hi > 0 else fb.depth, 0, 1)
            dpath = root / f"frame_{i:04d}.depth.png"
            Image.fromarray((depth8 * 255).astype(np.uint8), mode="L").save(dpath)
            written.append(dpath)
    return written
