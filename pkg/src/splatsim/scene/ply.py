"""Import of the common binary splat PLY interchange layout.

Expected properties per vertex: x, y, z, scale_0..2 (log storage),
rot_0..3 (w first, unnormalized), opacity (pre-logistic), f_dc_0..2, and
optionally f_rest_0..N-1 with N = 3*((L+1)^2 - 1). f_rest is stored
channel-major (all of R's coefficients, then G's, then B's), matching the
reference splat trainers. Extra properties (normals etc.) are ignored.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..errors import MissingFileError, PlyImportError
from .types import GaussianField, sh_degree_for_coeff_count

_PLY_DTYPES = {
    "float": "<f4", "float32": "<f4",
    "double": "<f8", "float64": "<f8",
    "uchar": "u1", "uint8": "u1", "char": "i1", "int8": "i1",
    "short": "<i2", "ushort": "<u2",
    "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4",
}


def _parse_header(data: bytes):
    end = data.find(b"end_header\n")
    if end < 0:
        raise PlyImportError("unsupported-property-layout: no PLY end_header")
    header = data[:end].decode("ascii", errors="replace").splitlines()
    body_offset = end + len(b"end_header\n")
    if not header or header[0].strip() != "ply":
        raise PlyImportError("unsupported-property-layout: not a PLY file")
    fmt = None
    count = None
    props: list[tuple[str, str]] = []
    in_vertex = False
    for line in header[1:]:
        parts = line.strip().split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                count = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            if parts[1] == "list":
                raise PlyImportError("unsupported-property-layout: list property "
                                     "in vertex element")
            props.append((parts[2], parts[1]))
    if fmt != "binary_little_endian":
        raise PlyImportError(f"unsupported-property-layout: format {fmt!r} "
                             "(need binary_little_endian)")
    if count is None:
        raise PlyImportError("unsupported-property-layout: no vertex element")
    return count, props, body_offset


def import_splats_ply(path) -> GaussianField:
    """Read a binary splat PLY; de-log scales, logistic opacity, unit quats."""
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"no PLY file at {path}")
    data = path.read_bytes()
    count, props, offset = _parse_header(data)

    try:
        dtype = np.dtype([(name, _PLY_DTYPES[t]) for name, t in props])
    except KeyError as exc:
        raise PlyImportError(f"unsupported-property-layout: property type {exc}")
    body = np.frombuffer(data, dtype=dtype, count=count, offset=offset)

    names = {name for name, _ in props}
    required = ({"x", "y", "z", "opacity"}
                | {f"scale_{i}" for i in range(3)}
                | {f"rot_{i}" for i in range(4)}
                | {f"f_dc_{i}" for i in range(3)})
    missing = sorted(required - names)
    if missing:
        raise PlyImportError(f"unsupported-property-layout: missing {missing}")

    rest_count = sum(1 for name in names if name.startswith("f_rest_"))
    if rest_count % 3 != 0:
        raise PlyImportError("unsupported-property-layout: f_rest count not "
                             "divisible by 3")
    per_channel = rest_count // 3
    degree = sh_degree_for_coeff_count(per_channel + 1)
    if degree < 0:
        raise PlyImportError(f"unsupported-property-layout: {per_channel + 1} SH "
                             "coefficients per channel is not (L+1)^2")

    def cols(names_: list[str]) -> np.ndarray:
        return np.stack([body[n].astype(np.float64) for n in names_], axis=1)

    means = cols(["x", "y", "z"])
    scales = np.exp(cols([f"scale_{i}" for i in range(3)]))
    quats = cols([f"rot_{i}" for i in range(4)])
    opacity_raw = body["opacity"].astype(np.float64)
    opacities = 1.0 / (1.0 + np.exp(-opacity_raw))
    dc = cols([f"f_dc_{i}" for i in range(3)])

    k = per_channel + 1
    sh = np.zeros((count, k, 3))
    sh[:, 0, :] = dc
    if per_channel:
        rest = cols([f"f_rest_{i}" for i in range(rest_count)])
        sh[:, 1:, :] = rest.reshape(count, 3, per_channel).transpose(0, 2, 1)

    for name, arr in (("mean", means), ("scale", scales), ("rotation", quats),
                      ("opacity", opacities), ("sh", sh)):
        if not np.isfinite(arr).all():
            raise PlyImportError(f"non-finite-value in {name}")

    norms = np.linalg.norm(quats, axis=1)
    if (norms == 0).any():
        raise PlyImportError("non-finite-value: zero-norm quaternion")
    quats = quats / norms[:, None]

    return GaussianField(means, scales, quats, opacities, sh, frame="world")
