"""File formats: ASCII XYZ, binary little-endian PLY, feature dumps, match CSV."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .geometry import Points, as_points

FEATURE_MAGIC = int.from_bytes(b"CRFEAT01", "little")

_PLY_DTYPES = {
    "char": "i1", "uchar": "u1", "short": "i2", "ushort": "u2",
    "int": "i4", "uint": "u4", "float": "f4", "double": "f8",
    "int8": "i1", "uint8": "u1", "int16": "i2", "uint16": "u2",
    "int32": "i4", "uint32": "u4", "float32": "f4", "float64": "f8",
}


def read_xyz(path: str | Path) -> Points:
    """Read one 'x y z' triple per line; blank lines are skipped."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 3 values, got {len(parts)}")
        rows.append([float(v) for v in parts])
    return as_points(np.array(rows) if rows else np.zeros((0, 3)))


def write_xyz(path: str | Path, cloud: Points) -> None:
    pts = as_points(cloud)
    # %.9g carries more digits than float32 can hold, so round-trips are safe.
    lines = [f"{x:.9g} {y:.9g} {z:.9g}" for x, y, z in pts]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def write_ply(path: str | Path, cloud: Points) -> None:
    """Write vertices as binary little-endian PLY with float32 x/y/z."""
    pts = as_points(cloud).astype("<f4")
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {len(pts)}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(pts.tobytes())


def read_ply(path: str | Path) -> Points:
    """Read vertex x/y/z from a binary little-endian PLY file.

    Extra scalar vertex properties are skipped; list properties on the vertex
    element (or elements preceding it) are rejected.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise ValueError(f"{path}: not a PLY file")
    header_lines = data[:end].decode("ascii", errors="replace").splitlines()
    body = data[end + len(b"end_header\n"):]

    fmt_lines = [l for l in header_lines if l.startswith("format")]
    if not fmt_lines or "binary_little_endian" not in fmt_lines[0]:
        raise ValueError(f"{path}: only binary_little_endian PLY is supported")

    n_vertex = None
    props: list[tuple[str, str]] = []
    in_vertex = False
    seen_vertex = False
    for line in header_lines:
        tokens = line.split()
        if not tokens:
            continue
        if tokens[0] == "element":
            if tokens[1] == "vertex":
                n_vertex = int(tokens[2])
                in_vertex = True
                seen_vertex = True
            else:
                if not seen_vertex:
                    raise ValueError(f"{path}: element before vertex not supported")
                in_vertex = False
        elif tokens[0] == "property" and in_vertex:
            if tokens[1] == "list":
                raise ValueError(f"{path}: list properties on vertex not supported")
            props.append((tokens[2], tokens[1]))
    if n_vertex is None:
        raise ValueError(f"{path}: no vertex element")

    dtype = np.dtype([(name, "<" + _PLY_DTYPES[tname]) for name, tname in props])
    for axis in ("x", "y", "z"):
        if axis not in dtype.names:
            raise ValueError(f"{path}: vertex element lacks property '{axis}'")
    need = n_vertex * dtype.itemsize
    if len(body) < need:
        raise ValueError(f"{path}: truncated vertex data")
    verts = np.frombuffer(body[:need], dtype=dtype)
    out = np.stack([verts["x"], verts["y"], verts["z"]], axis=1)
    return as_points(out.astype(np.float64))


def write_feature_dump(path: str | Path, feats: NDArray[np.float64]) -> None:
    """Binary feature cache: magic/n/d as little-endian u64, then float32 rows."""
    arr = np.asarray(feats, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"feature matrix must be 2-D, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<QQQ", FEATURE_MAGIC, arr.shape[0], arr.shape[1]))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_feature_dump(path: str | Path) -> NDArray[np.float64]:
    with open(path, "rb") as fh:
        header = fh.read(24)
        if len(header) != 24:
            raise ValueError(f"{path}: truncated header")
        magic, n, d = struct.unpack("<QQQ", header)
        if magic != FEATURE_MAGIC:
            raise ValueError(f"{path}: bad magic {magic:#x}")
        payload = fh.read(n * d * 4)
    if len(payload) != n * d * 4:
        raise ValueError(f"{path}: truncated payload")
    return np.frombuffer(payload, dtype="<f4").reshape(n, d).astype(np.float64)


def write_correspondence_csv(path: str | Path, corr_sets) -> None:
    """Dump correspondence sets as CSV rows: src_index,dst_index,score,stage."""
    lines = ["src_index,dst_index,score,stage"]
    for cs in corr_sets:
        for i in range(len(cs)):
            lines.append(f"{cs.src_indices[i]},{cs.dst_indices[i]},"
                         f"{cs.scores[i]:.12g},{cs.stage}")
    Path(path).write_text("\n".join(lines) + "\n")
