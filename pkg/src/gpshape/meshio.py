"""Readers and writers for OBJ, PLY (ASCII and binary little-endian) and XYZ.

Only geometry is read: vertex positions and triangle indices. Polygons with
more than three vertices are fan-triangulated; normals, texture coordinates
and materials are ignored.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import ParseError

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


@dataclass
class MeshData:
    vertices: np.ndarray
    faces: np.ndarray  # (F, 3) int64; empty for raw point clouds


def _fan(poly: list[int]) -> list[tuple[int, int, int]]:
    return [(poly[0], poly[i], poly[i + 1]) for i in range(1, len(poly) - 1)]


def read_obj(path) -> MeshData:
    verts, faces = [], []
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            try:
                if parts[0] == "v":
                    verts.append([float(x) for x in parts[1:4]])
                elif parts[0] == "f":
                    idx = []
                    for tok in parts[1:]:
                        i = int(tok.split("/")[0])
                        # negative indices are relative to the current end
                        idx.append(i - 1 if i > 0 else len(verts) + i)
                    faces.extend(_fan(idx))
            except (ValueError, IndexError) as exc:
                raise ParseError(f"{path}:{lineno}: malformed OBJ line") from exc
    V = np.asarray(verts, dtype=np.float64).reshape(-1, 3)
    F = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    return MeshData(V, F)


def _read_ply_header(fh):
    if fh.readline().strip() != b"ply":
        raise ParseError("not a PLY file")
    fmt = None
    elements = []  # [name, count, [(prop_name, dtype) or (prop_name, (count_dtype, item_dtype))]]
    while True:
        raw = fh.readline()
        if not raw:
            raise ParseError("truncated PLY header")
        parts = raw.decode("ascii", errors="replace").split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append([parts[1], int(parts[2]), []])
        elif parts[0] == "property":
            if not elements:
                raise ParseError("PLY property before element")
            if parts[1] == "list":
                elements[-1][2].append((parts[4], (_PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]])))
            else:
                elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]]))
        elif parts[0] == "end_header":
            break
    if fmt not in ("ascii", "binary_little_endian"):
        raise ParseError(f"unsupported PLY format {fmt!r}")
    return fmt, elements


def _ply_ascii(fh, elements):
    tokens = fh.read().split()
    pos = 0
    out = {}
    for name, count, props in elements:
        rows = []
        for _ in range(count):
            row = []
            for _pname, ptype in props:
                if isinstance(ptype, tuple):
                    n = int(tokens[pos])
                    pos += 1
                    row.append([float(t) for t in tokens[pos:pos + n]])
                    pos += n
                else:
                    row.append(float(tokens[pos]))
                    pos += 1
            rows.append(row)
        out[name] = (props, rows)
    return out


def _ply_binary(fh, elements):
    data = fh.read()
    pos = 0
    out = {}
    for name, count, props in elements:
        if not any(isinstance(t, tuple) for _, t in props):
            dt = np.dtype([(p, "<" + t) for p, t in props])
            arr = np.frombuffer(data, dtype=dt, count=count, offset=pos)
            pos += dt.itemsize * count
            out[name] = (props, arr)
            continue
        rows = []
        for _ in range(count):
            row = []
            for _pname, ptype in props:
                if isinstance(ptype, tuple):
                    cdt, idt = np.dtype("<" + ptype[0]), np.dtype("<" + ptype[1])
                    n = int(np.frombuffer(data, dtype=cdt, count=1, offset=pos)[0])
                    pos += cdt.itemsize
                    row.append(np.frombuffer(data, dtype=idt, count=n, offset=pos).tolist())
                    pos += idt.itemsize * n
                else:
                    dt = np.dtype("<" + ptype)
                    row.append(float(np.frombuffer(data, dtype=dt, count=1, offset=pos)[0]))
                    pos += dt.itemsize
            rows.append(row)
        out[name] = (props, rows)
    return out


def read_ply(path) -> MeshData:
    with open(path, "rb") as fh:
        try:
            fmt, elements = _read_ply_header(fh)
            body = _ply_ascii(fh, elements) if fmt == "ascii" else _ply_binary(fh, elements)
        except (KeyError, IndexError, ValueError) as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(f"{path}: malformed PLY") from exc
    if "vertex" not in body:
        raise ParseError(f"{path}: PLY has no vertex element")
    props, rows = body["vertex"]
    names = [p for p, _ in props]
    try:
        ix = [names.index(c) for c in ("x", "y", "z")]
    except ValueError as exc:
        raise ParseError(f"{path}: PLY vertex lacks x/y/z") from exc
    if isinstance(rows, np.ndarray):
        V = np.stack([rows[names[i]].astype(np.float64) for i in ix], axis=1)
    else:
        V = np.asarray([[r[i] for i in ix] for r in rows], dtype=np.float64).reshape(-1, 3)
    faces = []
    if "face" in body:
        fprops, frows = body["face"]
        li = [i for i, (_, t) in enumerate(fprops) if isinstance(t, tuple)]
        if li:
            for r in frows:
                faces.extend(_fan([int(i) for i in r[li[0]]]))
    F = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    return MeshData(V, F)


def read_xyz(path) -> MeshData:
    try:
        pts = np.loadtxt(path, dtype=np.float64, ndmin=2, comments="#")
    except ValueError as exc:
        raise ParseError(f"{path}: malformed XYZ") from exc
    if pts.shape[1] < 3:
        raise ParseError(f"{path}: XYZ rows need at least 3 columns")
    return MeshData(pts[:, :3].copy(), np.zeros((0, 3), dtype=np.int64))


def read_geometry(path) -> MeshData:
    """Dispatch on file extension (``.obj``, ``.ply``, ``.xyz``/``.txt``)."""
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".obj":
        data = read_obj(path)
    elif ext == ".ply":
        data = read_ply(path)
    elif ext in (".xyz", ".txt", ".pts"):
        data = read_xyz(path)
    else:
        raise ParseError(f"unsupported file extension {ext!r}")
    if len(data.faces) and (data.faces.min() < 0 or data.faces.max() >= len(data.vertices)):
        raise ParseError(f"{path}: face index out of range")
    return data


def write_xyz(path, points) -> None:
    np.savetxt(path, np.asarray(points, dtype=np.float64), fmt="%.17g")


def write_obj(path, vertices, faces) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for v in np.asarray(vertices, dtype=np.float64):
            fh.write("v %.17g %.17g %.17g\n" % tuple(v))
        for f in np.asarray(faces, dtype=np.int64):
            fh.write("f %d %d %d\n" % tuple(f + 1))


def write_ply(path, vertices, faces=None, binary: bool = False) -> None:
    V = np.asarray(vertices, dtype=np.float64)
    F = np.zeros((0, 3), dtype=np.int64) if faces is None else np.asarray(faces, dtype=np.int64)
    header = ["ply", "format %s 1.0" % ("binary_little_endian" if binary else "ascii"),
              f"element vertex {len(V)}", "property double x", "property double y",
              "property double z"]
    if len(F):
        header += [f"element face {len(F)}", "property list uchar int vertex_indices"]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(V.astype("<f8").tobytes())
            if len(F):
                rec = np.zeros(len(F), dtype=[("n", "u1"), ("i", "<i4", (3,))])
                rec["n"] = 3
                rec["i"] = F
                fh.write(rec.tobytes())
        else:
            for v in V:
                fh.write(("%.17g %.17g %.17g\n" % tuple(v)).encode("ascii"))
            for f in F:
                fh.write(("3 %d %d %d\n" % tuple(f)).encode("ascii"))
