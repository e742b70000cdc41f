"""Synthetic shape pairs used by the benchmark harness and tests."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mesh import TriMesh, save_mesh

# pipeline settings for the benchmark sweep; the skeleton is coarser and training
# shorter than the defaults so the whole suite runs in minutes on one core
BENCH_SETTINGS = {"theta_g": 0.08, "iters": 300, "lr": 1e-3, "normalization": "shared"}


def grid_plate(x0, x1, y0, y1, z=0.5, nx=4, ny=4) -> TriMesh:
    """Flat open plate split into ``nx * ny`` quads, two triangles each."""
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    v = np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, z)], axis=1)
    idx = np.arange(v.shape[0]).reshape(nx + 1, ny + 1)
    a = idx[:-1, :-1].ravel()
    b = idx[1:, :-1].ravel()
    c = idx[1:, 1:].ravel()
    d = idx[:-1, 1:].ravel()
    f = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
    return TriMesh(v, f)


def icosphere(subdivisions: int = 2, radius: float = 0.3, center=(0.5, 0.5, 0.5)) -> TriMesh:
    t = (1 + 5 ** 0.5) / 2
    v = [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t],
         [0, -1, -t], [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]]
    f = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
         [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
         [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    v = np.array(v, dtype=np.float64)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    f = np.array(f, dtype=np.int64)
    for _ in range(subdivisions):
        edges = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
        uniq, inv = np.unique(edges, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        mid = v[uniq[:, 0]] + v[uniq[:, 1]]
        mid /= np.linalg.norm(mid, axis=1, keepdims=True)
        m = len(f)
        ab, bc, ca = (inv[:m] + len(v), inv[m:2 * m] + len(v), inv[2 * m:] + len(v))
        v = np.concatenate([v, mid])
        f = np.concatenate([
            np.stack([f[:, 0], ab, ca], 1), np.stack([f[:, 1], bc, ab], 1),
            np.stack([f[:, 2], ca, bc], 1), np.stack([ab, bc, ca], 1),
        ])
    return TriMesh(v * radius + np.asarray(center), f)


_BOX_FACES = np.array([[0, 2, 1], [0, 3, 2], [4, 5, 6], [4, 6, 7], [0, 1, 5], [0, 5, 4],
                       [1, 2, 6], [1, 6, 5], [2, 3, 7], [2, 7, 6], [3, 0, 4], [3, 4, 7]])


def box(lo, hi, top_scale: float = 1.0) -> TriMesh:
    """Axis-aligned box; ``top_scale`` shrinks the top face about its center (a frustum)."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    v = np.array([[lo[0], lo[1], lo[2]], [hi[0], lo[1], lo[2]], [hi[0], hi[1], lo[2]], [lo[0], hi[1], lo[2]],
                  [lo[0], lo[1], hi[2]], [hi[0], lo[1], hi[2]], [hi[0], hi[1], hi[2]], [lo[0], hi[1], hi[2]]])
    c = (lo[:2] + hi[:2]) / 2
    v[4:, :2] = c + top_scale * (v[4:, :2] - c)
    return TriMesh(v, _BOX_FACES)


def merge_meshes(meshes) -> TriMesh:
    vs, fs, off = [], [], 0
    for m in meshes:
        vs.append(m.vertices)
        fs.append(m.triangles + off)
        off += m.n_vertices
    return TriMesh(np.concatenate(vs), np.concatenate(fs))


def table(leg_bottom: float, top_z: float, top_thickness: float = 0.05, gap: float = 0.005) -> TriMesh:
    """Table top plus four legs as five separate components; legs stop ``gap`` below the top."""
    parts = [box((0.2, 0.2, top_z), (0.8, 0.8, top_z + top_thickness))]
    for x, y in [(0.22, 0.22), (0.72, 0.22), (0.72, 0.72), (0.22, 0.72)]:
        parts.append(box((x, y, leg_bottom), (x + 0.06, y + 0.06, top_z - gap)))
    return merge_meshes(parts)


def bend(mesh: TriMesh, depth: float = 0.25, x_center: float = 0.5, half_width: float = 0.3) -> TriMesh:
    """Lift a flat plate into a parabolic trough along x."""
    v = mesh.vertices.copy()
    s = (v[:, 0] - x_center) / half_width
    v[:, 2] = v[:, 2] - depth / 2 + depth * s * s / 2
    return TriMesh(v, mesh.triangles)


@dataclass(frozen=True)
class ShapePair:
    name: str
    source: TriMesh
    target: TriMesh


def suite_pairs() -> list[ShapePair]:
    """The five benchmark pairs, already inside the unit cube."""
    plate = grid_plate(0.3, 0.6, 0.35, 0.65, 0.5, 3, 3)
    flat = grid_plate(0.2, 0.8, 0.2, 0.8, 0.5, 12, 12)
    moved = TriMesh(plate.vertices + np.array([0.1, 0.0, 0.0]), plate.triangles)
    sphere = icosphere(2, 0.3)
    ellipsoid = TriMesh((sphere.vertices - 0.5) * np.array([1.5, 1.0, 1.0]) + 0.5, sphere.triangles)
    return [
        ShapePair("plate_translate", plate, moved),
        ShapePair("plate_bend", flat, bend(flat)),
        ShapePair("sphere_ellipsoid", sphere, ellipsoid),
        ShapePair("box_taper", box((0.3, 0.3, 0.2), (0.7, 0.7, 0.8)),
                  box((0.3, 0.3, 0.2), (0.7, 0.7, 0.8), top_scale=0.5)),
        ShapePair("table_taller", table(0.25, 0.55), table(0.15, 0.65)),
    ]


def large_pair(subdivisions: int = 5) -> ShapePair:
    """Icosphere with 10242 vertices (at the default level) against its stretched copy."""
    sphere = icosphere(subdivisions, 0.3)
    ellipsoid = TriMesh((sphere.vertices - 0.5) * np.array([1.5, 1.0, 1.0]) + 0.5, sphere.triangles)
    return ShapePair("sphere_ellipsoid_10k", sphere, ellipsoid)


def get_pair(name: str) -> ShapePair:
    for p in suite_pairs() + [large_pair()]:
        if p.name == name:
            return p
    raise KeyError(f"unknown suite pair {name!r}")


def write_pair(pair: ShapePair, directory: str | Path) -> tuple[Path, Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    src, tgt = d / f"{pair.name}_source.obj", d / f"{pair.name}_target.obj"
    save_mesh(src, pair.source)
    save_mesh(tgt, pair.target)
    return src, tgt
