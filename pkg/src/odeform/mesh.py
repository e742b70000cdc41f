"""Triangle mesh container, OBJ/PLY I/O, normalization and cleanup."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

AREA_EPS = 1e-12


class MeshError(ValueError):
    """Raised for unreadable or malformed mesh data."""


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Indexed triangle mesh.

    ``vertices`` is a float64 ``(N, 3)`` array and ``triangles`` an int64
    ``(M, 3)`` array of indices into it. Triangles that repeat an index are
    representable (raw files contain them); :func:`remove_degenerates` strips
    them.
    """

    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(v)):
            raise MeshError("vertex coordinates must be finite")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise MeshError("triangle index out of range")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", f)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted ``(E, 2)`` index pairs."""
        return unique_edges(self.triangles)

    @cached_property
    def triangle_areas(self) -> np.ndarray:
        return triangle_areas(self.vertices, self.triangles)

    @cached_property
    def triangle_normals(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, k]] for k in range(3))
        n = np.cross(b - a, c - a)
        ln = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.where(ln > 0, ln, 1.0)

    def surface_area(self) -> float:
        return float(self.triangle_areas.sum())

    def with_vertices(self, vertices: np.ndarray) -> "TriMesh":
        return TriMesh(vertices, self.triangles)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


def unique_edges(triangles: np.ndarray) -> np.ndarray:
    f = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    if len(f) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    e = np.sort(e, axis=1)
    e = e[e[:, 0] != e[:, 1]]
    return np.unique(e, axis=0)


def triangle_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    if len(triangles) == 0:
        return np.zeros(0)
    a, b, c = (vertices[triangles[:, k]] for k in range(3))
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


# --------------------------------------------------------------------------
# I/O


def load_mesh(path: str | Path) -> TriMesh:
    """Read a Wavefront OBJ or PLY file; polygons are fan-triangulated."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise MeshError(f"cannot read {path}: {exc}") from exc
    if path.suffix.lower() == ".ply" or raw.startswith(b"ply"):
        verts, faces = _parse_ply(raw)
    else:
        verts, faces = _parse_obj(raw.decode("utf-8", errors="replace"))
    tris = _fan_triangulate(faces, len(verts))
    if len(tris) == 0:
        raise MeshError(f"{path}: mesh has no faces")
    return TriMesh(np.asarray(verts, dtype=np.float64).reshape(-1, 3), tris)


def _parse_obj(text: str):
    verts = []
    faces = []
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            try:
                verts.append([float(x) for x in parts[1:4]])
            except ValueError as exc:
                raise MeshError(f"line {lineno}: bad vertex") from exc
            if len(verts[-1]) != 3:
                raise MeshError(f"line {lineno}: vertex needs 3 coordinates")
        elif parts[0] == "f":
            idx = []
            for tok in parts[1:]:
                head = tok.split("/")[0]
                try:
                    i = int(head)
                except ValueError as exc:
                    raise MeshError(f"line {lineno}: bad face index {tok!r}") from exc
                # negative indices are relative to the vertices read so far
                idx.append(i - 1 if i > 0 else len(verts) + i)
            if len(idx) < 3:
                raise MeshError(f"line {lineno}: face with fewer than 3 vertices")
            faces.append(idx)
    return verts, faces


_PLY_TYPES = {
    "char": "b", "int8": "b", "uchar": "B", "uint8": "B",
    "short": "h", "int16": "h", "ushort": "H", "uint16": "H",
    "int": "i", "int32": "i", "uint": "I", "uint32": "I",
    "float": "f", "float32": "f", "double": "d", "float64": "d",
}


def _parse_ply(raw: bytes):
    end = raw.find(b"end_header")
    if end < 0:
        raise MeshError("PLY header not terminated")
    body_start = raw.index(b"\n", end) + 1
    header = raw[:end].decode("ascii", errors="replace").splitlines()
    fmt = None
    elements = []  # (name, count, [(prop, type, list_count_type)])
    for line in header:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property" and elements:
            if parts[1] == "list":
                elements[-1][2].append((parts[4], parts[3], parts[2]))
            else:
                elements[-1][2].append((parts[2], parts[1], None))
    if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
        raise MeshError(f"unsupported PLY format {fmt!r}")

    verts: list = []
    faces: list = []
    if fmt == "ascii":
        tokens = raw[body_start:].split()
        pos = 0
        for name, count, props in elements:
            for _ in range(count):
                rec = {}
                for pname, ptype, ctype in props:
                    if ctype is None:
                        rec[pname] = float(tokens[pos])
                        pos += 1
                    else:
                        n = int(tokens[pos])
                        rec[pname] = [int(t) for t in tokens[pos + 1:pos + 1 + n]]
                        pos += 1 + n
                _collect_ply(name, rec, verts, faces)
        return verts, faces

    endian = "<" if fmt == "binary_little_endian" else ">"
    pos = body_start
    try:
        for name, count, props in elements:
            for _ in range(count):
                rec = {}
                for pname, ptype, ctype in props:
                    if ctype is None:
                        code = endian + _PLY_TYPES[ptype]
                        (rec[pname],) = struct.unpack_from(code, raw, pos)
                        pos += struct.calcsize(code)
                    else:
                        ccode = endian + _PLY_TYPES[ctype]
                        (n,) = struct.unpack_from(ccode, raw, pos)
                        pos += struct.calcsize(ccode)
                        code = endian + _PLY_TYPES[ptype] * n
                        rec[pname] = list(struct.unpack_from(code, raw, pos))
                        pos += struct.calcsize(code)
                _collect_ply(name, rec, verts, faces)
    except (struct.error, KeyError) as exc:
        raise MeshError(f"truncated or malformed PLY body: {exc}") from exc
    return verts, faces


def _collect_ply(name, rec, verts, faces):
    if name == "vertex":
        verts.append([rec["x"], rec["y"], rec["z"]])
    elif name == "face":
        idx = rec.get("vertex_indices", rec.get("vertex_index"))
        if idx is None or len(idx) < 3:
            raise MeshError("PLY face without vertex indices")
        faces.append([int(i) for i in idx])


def _fan_triangulate(faces, n_vertices: int) -> np.ndarray:
    tris = []
    for face in faces:
        for i in face:
            if i < 0 or i >= n_vertices:
                raise MeshError(f"face index {i} out of range for {n_vertices} vertices")
        for k in range(1, len(face) - 1):
            tris.append((face[0], face[k], face[k + 1]))
    return np.asarray(tris, dtype=np.int64).reshape(-1, 3)


def save_mesh(path: str | Path, mesh: TriMesh) -> None:
    """Write ``mesh`` as OBJ with round-trip exact coordinates."""
    lines = ["v %r %r %r" % tuple(float(c) for c in v) for v in mesh.vertices]
    lines += ["f %d %d %d" % tuple(int(i) + 1 for i in t) for t in mesh.triangles]
    try:
        Path(path).write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise MeshError(f"cannot write {path}: {exc}") from exc


# --------------------------------------------------------------------------
# normalization


@dataclass(frozen=True)
class NormalizationTransform:
    """Uniform scale followed by a translation: ``x' = scale * x + translation``."""

    scale: float
    translation: np.ndarray

    def __post_init__(self):
        if not (self.scale > 0 and np.isfinite(self.scale)):
            raise ValueError("scale must be positive and finite")
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) * self.scale + self.translation

    def invert(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.translation) / self.scale

    def to_json(self) -> str:
        return json.dumps({"scale": self.scale, "translation": [float(x) for x in self.translation]})

    @classmethod
    def from_json(cls, text: str) -> "NormalizationTransform":
        d = json.loads(text)
        return cls(float(d["scale"]), np.asarray(d["translation"], dtype=np.float64))


def fit_normalization(points: np.ndarray) -> NormalizationTransform:
    """Transform mapping the bounding box of ``points`` to a unit box centered at 0.5."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise MeshError("cannot normalize an empty vertex set")
    lo, hi = points.min(axis=0), points.max(axis=0)
    extent = float((hi - lo).max())
    if not extent > 0:
        raise MeshError("all vertices coincide; bounding box has zero extent")
    scale = 1.0 / extent
    center = 0.5 * (lo + hi)
    return NormalizationTransform(scale, 0.5 - scale * center)


def normalize(mesh: TriMesh) -> tuple[TriMesh, NormalizationTransform]:
    tf = fit_normalization(mesh.vertices)
    return mesh.with_vertices(tf.apply(mesh.vertices)), tf


# --------------------------------------------------------------------------
# cleanup


def remove_degenerates(mesh: TriMesh, area_eps: float = AREA_EPS) -> TriMesh:
    """Drop triangles that repeat an index or have area below ``area_eps``."""
    f = mesh.triangles
    if len(f) == 0:
        return mesh
    distinct = (f[:, 0] != f[:, 1]) & (f[:, 1] != f[:, 2]) & (f[:, 0] != f[:, 2])
    keep = distinct & (mesh.triangle_areas >= area_eps)
    return TriMesh(mesh.vertices, f[keep])


def merge_duplicate_vertices(mesh: TriMesh, eps: float = 0.0) -> TriMesh:
    """Merge vertices closer than ``eps`` (exact matches when ``eps == 0``).

    The first occurrence of a cluster is its representative, so the output
    order is deterministic. Triangles that collapse are removed.
    """
    if eps < 0:
        raise ValueError("eps must be non-negative")
    v = mesh.vertices
    if len(v) == 0:
        return mesh
    if eps == 0:
        _, first, inverse = np.unique(v, axis=0, return_index=True, return_inverse=True)
        inverse = inverse.reshape(-1)
        # relabel clusters in order of first occurrence
        order = np.argsort(first, kind="stable")
        rank = np.empty_like(order)
        rank[order] = np.arange(len(order))
        remap = rank[inverse]
        reps = np.sort(first)
    else:
        remap, reps = _merge_within(v, eps)
    merged = TriMesh(v[reps], remap[mesh.triangles])
    return remove_degenerates(merged)


def _merge_within(v: np.ndarray, eps: float):
    cells = np.floor(v / eps).astype(np.int64)
    table: dict[tuple, list[int]] = {}
    remap = np.empty(len(v), dtype=np.int64)
    reps: list[int] = []
    offsets = [(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)]
    for idx in range(len(v)):
        c = cells[idx]
        found = -1
        for dx, dy, dz in offsets:
            for r in table.get((c[0] + dx, c[1] + dy, c[2] + dz), ()):
                if np.linalg.norm(v[reps[r]] - v[idx]) <= eps:
                    found = r
                    break
            if found >= 0:
                break
        if found < 0:
            found = len(reps)
            reps.append(idx)
            table.setdefault((c[0], c[1], c[2]), []).append(found)
        remap[idx] = found
    return remap, np.asarray(reps, dtype=np.int64)


def drop_unreferenced(mesh: TriMesh) -> TriMesh:
    used = np.zeros(mesh.n_vertices, dtype=bool)
    used[mesh.triangles.ravel()] = True
    if used.all():
        return mesh
    new_index = np.cumsum(used) - 1
    return TriMesh(mesh.vertices[used], new_index[mesh.triangles])


def clean_mesh(mesh: TriMesh, merge_eps: float = 0.0) -> TriMesh:
    """Degenerate removal, duplicate merging and isolated-vertex removal."""
    return drop_unreferenced(merge_duplicate_vertices(remove_degenerates(mesh), merge_eps))
