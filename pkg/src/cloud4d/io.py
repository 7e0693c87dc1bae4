"""Readers and writers for .xyz ascii and PLY (ascii / binary little-endian).

Only vertex positions are consumed; every other attribute is skipped. Parse
failures raise :class:`ParseError` naming the offending line or byte offset.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .pointcloud import PointCloud

__all__ = ["ParseError", "load_cloud", "save_cloud", "save_flow"]


class ParseError(ValueError):
    """Malformed or truncated point-cloud file."""


_PLY_SIZES = {
    "char": 1, "int8": 1, "uchar": 1, "uint8": 1,
    "short": 2, "int16": 2, "ushort": 2, "uint16": 2,
    "int": 4, "int32": 4, "uint": 4, "uint32": 4,
    "float": 4, "float32": 4,
    "double": 8, "float64": 8,
}
_PLY_STRUCT = {1: "b", 2: "h", 4: "i", 8: "q"}


def load_cloud(path, format: str | None = None, timestamp: float = 0.0) -> PointCloud:
    """Load a cloud from .xyz or .ply; the timestamp is supplied by the caller."""
    path = Path(path)
    if format is None:
        format = "ply" if path.suffix.lower() == ".ply" else "xyz"
    if format.startswith("ply"):
        pts = _load_ply(path)
    elif format == "xyz":
        pts = _load_xyz(path)
    else:
        raise ParseError(f"unknown format {format!r}")
    if len(pts) == 0:
        raise ParseError(f"{path}: empty cloud")
    if not np.all(np.isfinite(pts)):
        bad = int(np.argwhere(~np.isfinite(pts).all(axis=1))[0][0])
        raise ParseError(f"{path}: non-finite coordinates at vertex {bad}")
    return PointCloud(pts, timestamp)


def _load_xyz(path: Path) -> np.ndarray:
    rows = []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            tokens = line.split()
            if len(tokens) < 3:
                raise ParseError(f"{path}, line {lineno}: expected 3 floats, got {len(tokens)} tokens")
            try:
                rows.append([float(t) for t in tokens[:3]])
            except ValueError:
                raise ParseError(f"{path}, line {lineno}: cannot parse {tokens[:3]!r}") from None
    return np.array(rows, dtype=np.float64).reshape(-1, 3)


def _load_ply(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise ParseError(f"{path}: not a PLY file (missing header)")
    body_start = raw.find(b"\n", end) + 1
    header = raw[:end].decode("ascii", errors="replace").splitlines()

    fmt = None
    elements = []  # (name, count, [(type, name), ...])
    for lineno, line in enumerate(header, start=1):
        tokens = line.split()
        if not tokens or tokens[0] in ("ply", "comment", "obj_info"):
            continue
        if tokens[0] == "format":
            if tokens[1] not in ("ascii", "binary_little_endian"):
                raise ParseError(f"{path}, line {lineno}: unsupported format {tokens[1]!r}")
            fmt = tokens[1]
        elif tokens[0] == "element":
            elements.append((tokens[1], int(tokens[2]), []))
        elif tokens[0] == "property":
            if not elements:
                raise ParseError(f"{path}, line {lineno}: property before element")
            if tokens[1] == "list":
                elements[-1][2].append(("list", tokens[-1]))
            else:
                if tokens[1] not in _PLY_SIZES:
                    raise ParseError(f"{path}, line {lineno}: unknown property type {tokens[1]!r}")
                elements[-1][2].append((tokens[1], tokens[2]))
    if fmt is None:
        raise ParseError(f"{path}: header missing format line")

    vertex = next((e for e in elements if e[0] == "vertex"), None)
    if vertex is None:
        raise ParseError(f"{path}: no vertex element")
    _, count, props = vertex
    if count == 0:
        raise ParseError(f"{path}: empty cloud")
    names = [p[1] for p in props]
    if any(p[0] == "list" for p in props):
        raise ParseError(f"{path}: list property inside vertex element is unsupported")
    try:
        cols = [names.index(c) for c in ("x", "y", "z")]
    except ValueError:
        raise ParseError(f"{path}: vertex element lacks x/y/z properties") from None

    if elements[0][0] != "vertex":
        raise ParseError(f"{path}: vertex element must come first")

    if fmt == "ascii":
        text = raw[body_start:].decode("ascii", errors="replace").splitlines()
        data = np.empty((count, 3), dtype=np.float64)
        for i in range(count):
            if i >= len(text):
                raise ParseError(f"{path}: payload ends at vertex {i} of {count}")
            tokens = text[i].split()
            if len(tokens) < len(props):
                raise ParseError(f"{path}, vertex line {i + 1}: expected {len(props)} values")
            try:
                data[i] = [float(tokens[c]) for c in cols]
            except ValueError:
                raise ParseError(f"{path}, vertex line {i + 1}: cannot parse coordinates") from None
        return data

    stride = sum(_PLY_SIZES[p[0]] for p in props)
    need = count * stride
    if len(raw) - body_start < need:
        raise ParseError(
            f"{path}: short payload, need {need} bytes at offset {body_start}, "
            f"have {len(raw) - body_start}")
    offsets, fmt_chars = [], []
    pos = 0
    for ptype, _ in props:
        offsets.append(pos)
        if ptype in ("float", "float32"):
            fmt_chars.append("f")
        elif ptype in ("double", "float64"):
            fmt_chars.append("d")
        else:
            fmt_chars.append(_PLY_STRUCT[_PLY_SIZES[ptype]])
        pos += _PLY_SIZES[ptype]
    body = np.frombuffer(raw, dtype=np.uint8, offset=body_start, count=need)
    body = body.reshape(count, stride)
    data = np.empty((count, 3), dtype=np.float64)
    for j, c in enumerate(cols):
        spec = np.dtype("<" + fmt_chars[c])
        chunk = body[:, offsets[c]:offsets[c] + spec.itemsize]
        data[:, j] = np.ascontiguousarray(chunk).view(spec)[:, 0].astype(np.float64)
    return data


def save_cloud(path, pc: PointCloud, format: str = "ply-binary") -> None:
    """Write a cloud; PLY binary little-endian is the default format."""
    path = Path(path)
    pts = pc.points
    if format == "xyz":
        with open(path, "w") as fh:
            for x, y, z in pts:
                fh.write(f"{x:.9g} {y:.9g} {z:.9g}\n")
        return
    if format not in ("ply-binary", "ply-ascii"):
        raise ValueError(f"unknown save format {format!r}")
    binary = format == "ply-binary"
    header = [
        "ply",
        "format binary_little_endian 1.0" if binary else "format ascii 1.0",
        f"element vertex {len(pts)}",
        "property float x",
        "property float y",
        "property float z",
        "end_header",
    ]
    if binary:
        with open(path, "wb") as fh:
            fh.write(("\n".join(header) + "\n").encode("ascii"))
            fh.write(pts.astype("<f4").tobytes())
    else:
        with open(path, "w") as fh:
            fh.write("\n".join(header) + "\n")
            for x, y, z in pts:
                fh.write(f"{x:.9g} {y:.9g} {z:.9g}\n")


def save_flow(path, points: np.ndarray, flow: np.ndarray) -> None:
    """Write per-point flow as ascii rows of x y z fx fy fz."""
    if points.shape != flow.shape:
        raise ValueError("points and flow must have matching shapes")
    with open(path, "w") as fh:
        for (x, y, z), (fx, fy, fz) in zip(points, flow):
            fh.write(f"{x:.9g} {y:.9g} {z:.9g} {fx:.9g} {fy:.9g} {fz:.9g}\n")
