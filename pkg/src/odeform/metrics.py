"""Evaluation metrics: sampled two-way Chamfer distance and self-intersection counts."""

from __future__ import annotations

import numpy as np

from ._bvh import TriangleBVH
from .mesh import MeshError, TriMesh
from .spatial import NearestIndex


def sample_surface(mesh: TriMesh, n_samples: int, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform samples on the surface, reproducible for a given seed."""
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    areas = mesh.triangle_areas
    total = float(areas.sum()) if len(areas) else 0.0
    if total <= 0.0:
        raise MeshError("cannot sample a mesh with zero surface area")
    rng = np.random.default_rng(seed)
    tri = rng.choice(len(areas), size=n_samples, p=areas / total)
    r1 = np.sqrt(rng.random(n_samples))
    r2 = rng.random(n_samples)
    v = mesh.vertices[mesh.triangles[tri]]
    return ((1 - r1)[:, None] * v[:, 0] + (r1 * (1 - r2))[:, None] * v[:, 1]
            + (r1 * r2)[:, None] * v[:, 2])


def _as_samples(obj, n_samples: int, seed: int) -> np.ndarray:
    if isinstance(obj, TriMesh):
        return sample_surface(obj, n_samples, seed)
    pts = np.asarray(obj, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("empty sample set")
    return pts


def mean_nearest_sq(a: np.ndarray, b: np.ndarray) -> float:
    """Mean over ``a`` of the squared distance to the nearest point of ``b``."""
    idx, _ = NearestIndex(b).query(a)
    diff = a - b[idx]
    return float(np.mean(np.sum(diff * diff, axis=1)))


def two_way_chamfer(a, b, n_samples: int = 10_000, seed: int = 0) -> float:
    """Two-way Chamfer distance between meshes or explicit point sets.

    Meshes are sampled with ``n_samples`` area-weighted points each, both using
    ``seed``; arrays are used as given.
    """
    pa = _as_samples(a, n_samples, seed)
    pb = _as_samples(b, n_samples, seed)
    return mean_nearest_sq(pa, pb) + mean_nearest_sq(pb, pa)


def self_intersecting_pairs(mesh: TriMesh) -> np.ndarray:
    """Sorted ``(i, j)`` pairs of triangles sharing no vertex index whose surfaces intersect."""
    if mesh.n_triangles < 2:
        return np.zeros((0, 2), dtype=np.int64)
    pairs = TriangleBVH(mesh.vertices, mesh.triangles).intersecting_pairs()
    if len(pairs) == 0:
        return pairs.reshape(0, 2)
    return pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]


def count_self_intersections(mesh: TriMesh) -> int:
    return len(self_intersecting_pairs(mesh))


def new_self_intersections(before: TriMesh, after: TriMesh) -> int:
    """Intersecting pairs in ``after`` that were not intersecting in ``before`` (same topology)."""
    if before.n_triangles != after.n_triangles:
        raise ValueError("meshes must share triangle indexing")
    old = {tuple(p) for p in self_intersecting_pairs(before).tolist()}
    return sum(1 for p in self_intersecting_pairs(after).tolist() if tuple(p) not in old)
