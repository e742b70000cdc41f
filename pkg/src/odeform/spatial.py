"""Distance grid for the fixed target and exact nearest-neighbor index for moving points."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from ._bvh import TriangleBVH
from .mesh import MeshError, TriMesh

GRID_MAGIC = b"MODF"


@dataclass(frozen=True, eq=False)
class DistanceGrid:
    """Unsigned distances sampled at cell centers of a ``resolution**3`` grid over the unit cube.

    ``values[i, j, k]`` is the distance at ``((i, j, k) + 0.5) / resolution``.
    """

    values: np.ndarray

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    @property
    def cell_size(self) -> float:
        return 1.0 / self.resolution

    def query(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return query_distance(self, points)

    def save(self, path: str | Path) -> None:
        r = self.resolution
        blob = np.asarray(self.values, dtype="<f4").ravel(order="F").tobytes()
        Path(path).write_bytes(GRID_MAGIC + struct.pack("<I", r) + blob)

    @classmethod
    def load(cls, path: str | Path) -> "DistanceGrid":
        raw = Path(path).read_bytes()
        if raw[:4] != GRID_MAGIC:
            raise ValueError(f"{path}: not a distance grid file")
        (r,) = struct.unpack_from("<I", raw, 4)
        vals = np.frombuffer(raw, dtype="<f4", count=r**3, offset=8)
        return cls(vals.reshape((r, r, r), order="F").astype(np.float64))


def cell_centers(resolution: int) -> np.ndarray:
    """Cell centers in x-fastest order, shape ``(resolution**3, 3)``."""
    c = (np.arange(resolution) + 0.5) / resolution
    gz, gy, gx = np.meshgrid(c, c, c, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)


def point_mesh_distance(mesh: TriMesh, points: np.ndarray, bvh: TriangleBVH | None = None) -> np.ndarray:
    """Exact unsigned distance from each point to the nearest triangle."""
    if mesh.n_triangles == 0:
        raise MeshError("distance to a mesh without triangles")
    bvh = bvh or TriangleBVH(mesh.vertices, mesh.triangles)
    return np.sqrt(bvh.nearest_sq_distance(points))


def build_distance_grid(mesh: TriMesh, resolution: int = 64) -> DistanceGrid:
    if resolution < 2:
        raise ValueError("resolution must be at least 2")
    d = point_mesh_distance(mesh, cell_centers(resolution))
    return DistanceGrid(d.reshape((resolution,) * 3, order="F"))


def _cell_coords(resolution: int, points: np.ndarray):
    """Lower corner index, fractional offset and in-range mask for trilinear lookup."""
    p = np.clip(points, 0.0, 1.0)
    u = p * resolution - 0.5
    inside = (u > 0.0) & (u < resolution - 1)
    u = np.clip(u, 0.0, resolution - 1.0)
    i0 = np.minimum(np.floor(u).astype(np.int64), resolution - 2)
    return i0, u - i0, inside


def query_distance(grid: DistanceGrid, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Trilinear distance and its gradient at ``points`` (shape ``(n, 3)``).

    Points are clamped into the unit cube, and coordinates beyond the outermost
    cell centers are held at those centers, so the gradient along a clamped
    axis is zero.
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 3)
    r = grid.resolution
    g = grid.values
    i0, f, inside = _cell_coords(r, pts)
    x, y, z = i0[:, 0], i0[:, 1], i0[:, 2]
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    c000 = g[x, y, z]
    c100 = g[x + 1, y, z]
    c010 = g[x, y + 1, z]
    c110 = g[x + 1, y + 1, z]
    c001 = g[x, y, z + 1]
    c101 = g[x + 1, y, z + 1]
    c011 = g[x, y + 1, z + 1]
    c111 = g[x + 1, y + 1, z + 1]
    c00 = c000 + fx * (c100 - c000)
    c10 = c010 + fx * (c110 - c010)
    c01 = c001 + fx * (c101 - c001)
    c11 = c011 + fx * (c111 - c011)
    c0 = c00 + fy * (c10 - c00)
    c1 = c01 + fy * (c11 - c01)
    d = c0 + fz * (c1 - c0)

    dx = (1 - fy) * (1 - fz) * (c100 - c000) + fy * (1 - fz) * (c110 - c010) \
        + (1 - fy) * fz * (c101 - c001) + fy * fz * (c111 - c011)
    dy = (1 - fz) * (c10 - c00) + fz * (c11 - c01)
    dz = c1 - c0
    grad = np.stack([dx, dy, dz], axis=1) * r * inside
    if single:
        return d[0], grad[0]
    return d, grad


class NearestIndex:
    """Exact Euclidean nearest neighbor over an immutable snapshot of points.

    Ties resolve to the lowest point index. Distances are recomputed directly
    from coordinates, so they match a brute-force scan bit for bit.
    """

    def __init__(self, points: np.ndarray):
        pts = np.array(points, dtype=np.float64).reshape(-1, 3)
        if len(pts) == 0:
            raise ValueError("nearest index needs at least one point")
        pts.setflags(write=False)
        self.points = pts
        self._tree = cKDTree(pts)

    def __len__(self) -> int:
        return len(self.points)

    def query(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        k = min(4, len(self.points))
        dist, idx = self._tree.query(q, k=k)
        dist = dist.reshape(len(q), k)
        idx = idx.reshape(len(q), k)
        diff = self.points[idx] - q[:, None, :]
        exact = np.sqrt(np.sum(diff * diff, axis=-1))
        # lexicographic (distance, index) minimum over the candidates
        order = np.lexsort((idx, exact), axis=1) if k > 1 else np.zeros((len(q), 1), dtype=np.int64)
        best = order[:, 0]
        rows = np.arange(len(q))
        out_idx = idx[rows, best]
        out_d = exact[rows, best]

        # near-ties may extend past the k candidates returned by the tree
        if k < len(self.points):
            slack = out_d * (1 + 1e-9) + 1e-300
            suspect = np.flatnonzero(dist[:, -1] <= slack)
            for s in suspect:
                cand = np.asarray(self._tree.query_ball_point(q[s], slack[s] * (1 + 1e-9)), dtype=np.int64)
                cand = np.union1d(cand, idx[s])
                dd = self.points[cand] - q[s]
                ed = np.sqrt(np.sum(dd * dd, axis=-1))
                m = ed.min()
                out_idx[s] = cand[ed == m].min()
                out_d[s] = m
        return out_idx, out_d


def build_nearest_index(points: np.ndarray) -> NearestIndex:
    return NearestIndex(points)


def query_nearest(index: NearestIndex, p: np.ndarray) -> tuple[int, float]:
    i, d = index.query(np.asarray(p, dtype=np.float64).reshape(1, 3))
    return int(i[0]), float(d[0])
