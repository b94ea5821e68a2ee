"""OBJ/PLY triangle mesh IO and unit normalization."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class MeshError(ValueError):
    pass


@dataclass
class InputMesh:
    vertices: np.ndarray  # [V, 3], normalized units
    faces: np.ndarray  # [F, 3]
    centroid: np.ndarray  # [3], in source units
    scale: float  # factor applied after centering

    def denormalize(self, vertices: np.ndarray | None = None) -> np.ndarray:
        v = self.vertices if vertices is None else np.asarray(vertices)
        return v / self.scale + self.centroid

    @property
    def normalization(self) -> tuple[np.ndarray, float]:
        return self.centroid, self.scale


def normalize_vertices(vertices: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Center on the vertex centroid and scale the longest bounding-box side to 1."""
    v = np.asarray(vertices, dtype=np.float64)
    centroid = v.mean(0)
    extent = (v.max(0) - v.min(0)).max()
    if not extent > 0:
        raise MeshError("mesh has zero extent")
    scale = 1.0 / extent
    return (v - centroid) * scale, centroid, scale


def normalize_mesh(vertices, faces) -> InputMesh:
    faces = np.asarray(faces, dtype=np.int64)
    vertices = np.asarray(vertices, dtype=np.float64)
    if len(vertices) == 0 or len(faces) == 0:
        raise MeshError("empty mesh")
    if faces.min() < 0 or faces.max() >= len(vertices):
        raise MeshError("faces index vertices out of range")
    v, c, s = normalize_vertices(vertices)
    return InputMesh(v, faces, c, s)


def read_obj(path) -> tuple[np.ndarray, np.ndarray]:
    verts, faces = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(tok.split("/")[0]) for tok in parts[1:]]
            if len(idx) != 3:
                raise MeshError(f"{path}:{lineno}: face with {len(idx)} vertices; only triangles are supported")
            faces.append([i - 1 if i > 0 else len(verts) + i for i in idx])
    return np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


_PLY_TYPES = {
    "char": "i1", "uchar": "u1", "short": "i2", "ushort": "u2", "int": "i4", "uint": "u4",
    "float": "f4", "double": "f8", "int8": "i1", "uint8": "u1", "int16": "i2", "uint16": "u2",
    "int32": "i4", "uint32": "u4", "float32": "f4", "float64": "f8",
}  # fmt: skip


def read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    """ASCII and binary PLY with a vertex element (x, y, z) and a face list element."""
    data = Path(path).read_bytes()
    end = data.index(b"end_header") + len(b"end_header")
    end = data.index(b"\n", end) + 1
    header = data[:end].decode("ascii").splitlines()
    fmt = None
    elements = []
    for line in header:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append({"name": tok[1], "count": int(tok[2]), "props": []})
        elif tok[0] == "property":
            if tok[1] == "list":
                elements[-1]["props"].append((tok[4], "list", _PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]]))
            else:
                elements[-1]["props"].append((tok[2], _PLY_TYPES[tok[1]]))
    body = data[end:]
    verts = faces = None
    if fmt == "ascii":
        tokens = body.decode("ascii").split()
        pos = 0
        for el in elements:
            rows = []
            for _ in range(el["count"]):
                row = {}
                for prop in el["props"]:
                    if prop[1] == "list":
                        n = int(tokens[pos])
                        row[prop[0]] = [int(t) for t in tokens[pos + 1 : pos + 1 + n]]
                        pos += 1 + n
                    else:
                        row[prop[0]] = float(tokens[pos])
                        pos += 1
                rows.append(row)
            if el["name"] == "vertex":
                verts = np.array([[r["x"], r["y"], r["z"]] for r in rows], dtype=np.float64)
            elif el["name"] == "face":
                key = el["props"][0][0]
                faces = [r[key] for r in rows]
    elif fmt in ("binary_little_endian", "binary_big_endian"):
        bo = "<" if fmt == "binary_little_endian" else ">"
        pos = 0
        for el in elements:
            if all(p[1] != "list" for p in el["props"]):
                dt = np.dtype([(p[0], bo + p[1]) for p in el["props"]])
                arr = np.frombuffer(body, dtype=dt, count=el["count"], offset=pos)
                pos += dt.itemsize * el["count"]
                if el["name"] == "vertex":
                    verts = np.stack([arr["x"], arr["y"], arr["z"]], 1).astype(np.float64)
            else:
                rows = []
                for _ in range(el["count"]):
                    row = None
                    for prop in el["props"]:
                        if prop[1] == "list":
                            cdt = np.dtype(bo + prop[2])
                            n = int(np.frombuffer(body, cdt, 1, pos)[0])
                            pos += cdt.itemsize
                            idt = np.dtype(bo + prop[3])
                            vals = np.frombuffer(body, idt, n, pos).astype(np.int64)
                            pos += idt.itemsize * n
                            if row is None:
                                row = list(vals)
                        else:
                            pos += np.dtype(prop[1]).itemsize
                    rows.append(row)
                if el["name"] == "face":
                    faces = rows
    else:
        raise MeshError(f"{path}: unsupported PLY format {fmt!r}")
    if verts is None or faces is None:
        raise MeshError(f"{path}: PLY needs vertex and face elements")
    for i, f in enumerate(faces):
        if len(f) != 3:
            raise MeshError(f"{path}: face {i} has {len(f)} vertices; only triangles are supported")
    return verts, np.array(faces, dtype=np.int64).reshape(-1, 3)


def read_mesh(path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        return read_obj(path)
    if suffix == ".ply":
        return read_ply(path)
    raise MeshError(f"{path}: unsupported mesh format {suffix!r} (expected .obj or .ply)")


def load_and_normalize_mesh(path) -> InputMesh:
    verts, faces = read_mesh(path)
    if len(verts) == 0 or len(faces) == 0:
        raise MeshError(f"{path}: empty mesh")
    return normalize_mesh(verts, faces)


def write_obj(path, vertices, faces) -> None:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in np.asarray(vertices)]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(faces)]
    Path(path).write_text("\n".join(lines) + "\n")


def vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals."""
    v = np.asarray(vertices, dtype=np.float64)
    fn = np.cross(v[faces[:, 1]] - v[faces[:, 0]], v[faces[:, 2]] - v[faces[:, 0]])
    n = np.zeros_like(v)
    for k in range(3):
        np.add.at(n, faces[:, k], fn)
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return n / np.where(norm > 0, norm, 1.0)


def mesh_edges(faces: np.ndarray) -> np.ndarray:
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    return np.unique(np.sort(e, axis=1), axis=0)
