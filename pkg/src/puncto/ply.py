"""Minimal PLY reader/writer for colored point clouds.

Reads ``ascii 1.0`` and ``binary_little_endian 1.0`` vertex elements. Colors may
be uchar (scaled by 1/255) or float in [0, 1]. Writes binary little-endian
with uchar colors and optional extra integer vertex properties.
"""
from __future__ import annotations

import os
from typing import Mapping

import numpy as np

from .geometry import PointCloud

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


class PlyError(ValueError):
    pass


def _parse_header(fh):
    first = fh.readline().strip()
    if first != b"ply":
        raise PlyError("missing 'ply' magic line")
    fmt = None
    elements = []  # [name, count, [(prop, dtype)]]
    while True:
        line = fh.readline()
        if not line:
            raise PlyError("unexpected end of file in header")
        tokens = line.decode("ascii", errors="replace").split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        if tokens[0] == "format":
            fmt = tokens[1]
            if fmt not in ("ascii", "binary_little_endian") or tokens[2] != "1.0":
                raise PlyError(f"unsupported PLY format {' '.join(tokens[1:])}")
        elif tokens[0] == "element":
            elements.append([tokens[1], int(tokens[2]), []])
        elif tokens[0] == "property":
            if not elements:
                raise PlyError("property before any element")
            if tokens[1] == "list":
                elements[-1][2].append((tokens[4], ("list", _PLY_TYPES[tokens[2]], _PLY_TYPES[tokens[3]])))
            else:
                if tokens[1] not in _PLY_TYPES:
                    raise PlyError(f"unknown property type {tokens[1]}")
                elements[-1][2].append((tokens[2], _PLY_TYPES[tokens[1]]))
        elif tokens[0] == "end_header":
            break
        else:
            raise PlyError(f"unexpected header line: {line!r}")
    if fmt is None:
        raise PlyError("header has no format line")
    return fmt, elements


def read_ply_vertices(path: str | os.PathLike) -> np.ndarray:
    """Return the vertex element as a numpy structured array."""
    with open(path, "rb") as fh:
        fmt, elements = _parse_header(fh)
        if not elements or elements[0][0] != "vertex":
            raise PlyError("first element must be 'vertex'")
        _, count, props = elements[0]
        if any(isinstance(t, tuple) for _, t in props):
            raise PlyError("list properties on vertices are not supported")
        if fmt == "ascii":
            dtype = np.dtype([(name, t) for name, t in props])
            rows = []
            for _ in range(count):
                line = fh.readline()
                if not line:
                    raise PlyError("truncated ascii vertex data")
                rows.append(tuple(line.split()[: len(props)]))
            data = np.array(rows, dtype=np.dtype([(name, "U32") for name, _ in props]))
            return data.astype(dtype)
        dtype = np.dtype([(name, "<" + t) for name, t in props])
        raw = fh.read(dtype.itemsize * count)
        if len(raw) != dtype.itemsize * count:
            raise PlyError("truncated binary vertex data")
        return np.frombuffer(raw, dtype=dtype, count=count).copy()


def read_ply(path: str | os.PathLike, id: str | None = None) -> PointCloud:
    vertices = read_ply_vertices(path)
    names = vertices.dtype.names
    for axis in "xyz":
        if axis not in names:
            raise PlyError(f"vertex property {axis!r} missing")
    positions = np.stack([vertices[a].astype(np.float64) for a in "xyz"], axis=1)
    if all(c in names for c in ("red", "green", "blue")):
        cols = np.stack([vertices[c] for c in ("red", "green", "blue")], axis=1)
        if cols.dtype == np.uint8:
            colors = cols.astype(np.float64) / 255.0
        elif cols.dtype.kind == "f":
            colors = cols.astype(np.float64)
        else:
            raise PlyError(f"unsupported color type {cols.dtype}")
    else:
        colors = np.full_like(positions, 0.4)
    if id is None:
        id = os.path.splitext(os.path.basename(os.fspath(path)))[0]
    return PointCloud(positions, colors, id)


def write_ply(
    path: str | os.PathLike,
    cloud: PointCloud,
    extra: Mapping[str, np.ndarray] | None = None,
) -> None:
    """Write binary little-endian PLY; ``extra`` adds int32 vertex properties."""
    extra = dict(extra or {})
    n = len(cloud)
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("red", "u1"), ("green", "u1"), ("blue", "u1")]
    fields += [(name, "<i4") for name in extra]
    data = np.empty(n, dtype=np.dtype(fields))
    for i, axis in enumerate("xyz"):
        data[axis] = cloud.positions[:, i]
    rgb = np.clip(np.round(cloud.colors * 255.0), 0, 255).astype(np.uint8)
    for i, c in enumerate(("red", "green", "blue")):
        data[c] = rgb[:, i]
    for name, values in extra.items():
        values = np.asarray(values)
        if values.shape != (n,):
            raise ValueError(f"extra property {name!r} must have shape ({n},)")
        data[name] = values

    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += ["property float x", "property float y", "property float z"]
    header += ["property uchar red", "property uchar green", "property uchar blue"]
    header += [f"property int {name}" for name in extra]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data.tobytes())
