"""Minimal PLY reading (vertex positions) and ASCII writing (points, meshes)."""

from __future__ import annotations

import os

import numpy as np

from .errors import ParseError

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def read_ply_vertices(path) -> np.ndarray:
    """Return the ``(n, 3)`` vertex positions of an ASCII or little-endian PLY."""
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"ply":
            raise ParseError("not a PLY file", 1)
        fmt = None
        elements = []  # (name, count, [(prop, dtype or ('list', count_t, item_t))])
        line_no = 1
        while True:
            raw = fh.readline()
            line_no += 1
            if not raw:
                raise ParseError("unterminated PLY header", line_no)
            tok = raw.decode("ascii", "replace").split()
            if not tok or tok[0] in ("comment", "obj_info"):
                continue
            if tok[0] == "end_header":
                break
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "element":
                elements.append((tok[1], int(tok[2]), []))
            elif tok[0] == "property":
                if not elements:
                    raise ParseError("property before element", line_no)
                if tok[1] == "list":
                    elements[-1][2].append((tok[4], ("list", _PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]])))
                else:
                    if tok[1] not in _PLY_TYPES:
                        raise ParseError(f"unknown property type {tok[1]!r}", line_no)
                    elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
        if fmt not in ("ascii", "binary_little_endian"):
            raise ParseError(f"unsupported PLY format {fmt!r}", 1)

        for name, count, props in elements:
            if name == "vertex":
                names = [p[0] for p in props]
                if not {"x", "y", "z"} <= set(names):
                    raise ParseError("vertex element lacks x, y, z")
                if any(isinstance(p[1], tuple) for p in props):
                    raise ParseError("list properties on vertices are not supported")
                if fmt == "ascii":
                    rows = []
                    for i in range(count):
                        raw = fh.readline()
                        line_no += 1
                        vals = raw.split()
                        if len(vals) < len(props):
                            raise ParseError("short vertex record", line_no)
                        try:
                            rows.append([float(vals[names.index(c)]) for c in "xyz"])
                        except ValueError as exc:
                            raise ParseError(str(exc), line_no) from None
                    return np.asarray(rows, dtype=float).reshape(-1, 3)
                dtype = np.dtype([(n, "<" + t) for n, t in props])
                buf = fh.read(dtype.itemsize * count)
                if len(buf) != dtype.itemsize * count:
                    raise ParseError("truncated binary vertex data")
                arr = np.frombuffer(buf, dtype=dtype)
                return np.stack([arr[c].astype(float) for c in "xyz"], axis=1)
            # skip a preceding element
            if fmt == "ascii":
                for _ in range(count):
                    fh.readline()
                    line_no += 1
            elif any(isinstance(p[1], tuple) for p in props):
                for _ in range(count):
                    for _, t in props:
                        if isinstance(t, tuple):
                            n = int(np.frombuffer(fh.read(np.dtype(t[1]).itemsize), "<" + t[1])[0])
                            fh.read(n * np.dtype(t[2]).itemsize)
                        else:
                            fh.read(np.dtype(t).itemsize)
            else:
                fh.read(sum(np.dtype(t).itemsize for _, t in props) * count)
    raise ParseError("PLY file has no vertex element")


def _fmt(v: float) -> str:
    return repr(float(v))


def write_ply_points(path, points, values=None, value_name: str = "value") -> None:
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(points)}\n")
        fh.write("property double x\nproperty double y\nproperty double z\n")
        if values is not None:
            fh.write(f"property double {value_name}\n")
        fh.write("end_header\n")
        for i, p in enumerate(points):
            row = [_fmt(c) for c in p]
            if values is not None:
                row.append(_fmt(values[i]))
            fh.write(" ".join(row) + "\n")


def write_ply_mesh(path, vertices, faces) -> None:
    vertices = np.asarray(vertices, dtype=float).reshape(-1, 3)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(vertices)}\n")
        fh.write("property double x\nproperty double y\nproperty double z\n")
        fh.write(f"element face {len(faces)}\n")
        fh.write("property list uchar int vertex_indices\n")
        fh.write("end_header\n")
        for v in vertices:
            fh.write(" ".join(_fmt(c) for c in v) + "\n")
        for f in faces:
            fh.write(f"3 {f[0]} {f[1]} {f[2]}\n")


def read_ply_mesh(path) -> tuple[np.ndarray, np.ndarray]:
    """Read back an ASCII triangle mesh written by :func:`write_ply_mesh`."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    nv = nf = 0
    start = 0
    for i, line in enumerate(lines):
        tok = line.split()
        if tok[:2] == ["element", "vertex"]:
            nv = int(tok[2])
        elif tok[:2] == ["element", "face"]:
            nf = int(tok[2])
        elif tok and tok[0] == "end_header":
            start = i + 1
            break
    verts = np.array([[float(v) for v in lines[start + i].split()[:3]] for i in range(nv)]).reshape(-1, 3)
    faces = np.array([[int(v) for v in lines[start + nv + i].split()[1:4]] for i in range(nf)],
                     dtype=np.int64).reshape(-1, 3)
    return verts, faces


def atomic_path(path) -> str:
    return os.fspath(path) + ".partial"
