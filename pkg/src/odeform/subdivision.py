"""Lattice-based subdivision of triangle meshes.

Each triangle is resampled with a square lattice aligned to a per-face
cross field; triangle sides are cut into uniform segments shared by all
incident faces, and every face patch is re-triangulated with a
constrained 2D Delaunay triangulation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import triangle as tr

from .mesh import TriMesh

LATTICE_FACTOR = (1.0 - 1e-6) / math.sqrt(2.0)
BOUNDARY_MARGIN = 0.25

ORIGIN_VERTEX, ORIGIN_EDGE, ORIGIN_FACE = 0, 1, 2


class SubdivisionError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class OrientationField:
    """One unit tangent direction per triangle (a 4-fold symmetric cross)."""

    directions: np.ndarray

    def __len__(self) -> int:
        return len(self.directions)


@dataclass(frozen=True, eq=False)
class SubdividedMesh:
    """Subdivided mesh with per-vertex provenance.

    ``origin_kind[i]`` is one of ``ORIGIN_VERTEX``, ``ORIGIN_EDGE`` or
    ``ORIGIN_FACE``; ``origin_index`` is the source vertex, edge (row of
    ``source.edges``) or triangle; ``origin_param`` holds the edge parameter
    in column 0 or barycentric coordinates. ``triangle_source`` maps every
    output triangle to its source triangle. Original vertices keep their
    indices.
    """

    mesh: TriMesh
    source: TriMesh
    origin_kind: np.ndarray
    origin_index: np.ndarray
    origin_param: np.ndarray
    triangle_source: np.ndarray
    theta_l: float

    @property
    def vertices(self) -> np.ndarray:
        return self.mesh.vertices

    @property
    def triangles(self) -> np.ndarray:
        return self.mesh.triangles


# --------------------------------------------------------------------------
# orientation field


def face_adjacency(mesh: TriMesh) -> tuple[np.ndarray, np.ndarray]:
    """Pairs of faces sharing an undirected edge, plus that edge's vertex pair."""
    f = mesh.triangles
    sides = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    owner = np.tile(np.arange(len(f)), 3)
    key = np.sort(sides, axis=1)
    order = np.lexsort((owner, key[:, 1], key[:, 0]))
    key, owner = key[order], owner[order]
    pairs = []
    shared = []
    start = 0
    n = len(key)
    while start < n:
        stop = start + 1
        while stop < n and key[stop, 0] == key[start, 0] and key[stop, 1] == key[start, 1]:
            stop += 1
        group = owner[start:stop]
        for a in range(len(group)):
            for b in range(a + 1, len(group)):
                if group[a] != group[b]:
                    pairs.append((group[a], group[b]))
                    shared.append(key[start])
        start = stop
    if not pairs:
        return np.zeros((0, 2), dtype=np.int64), np.zeros((0, 2), dtype=np.int64)
    return np.asarray(pairs, dtype=np.int64), np.asarray(shared, dtype=np.int64)


def _transport(d, n_from, n_to, axis):
    """Carry tangent vectors across a hinge ``axis`` from one face plane to another."""
    along = np.sum(d * axis, axis=1, keepdims=True)
    across = np.sum(d * np.cross(n_from, axis), axis=1, keepdims=True)
    return along * axis + across * np.cross(n_to, axis)


def _best_representative(t, n, d):
    """Among the four 90-degree rotations of ``t`` about ``n``, the one closest to ``d``."""
    cands = np.stack([t, np.cross(n, t), -t, -np.cross(n, t)], axis=1)
    score = np.einsum("nkc,nc->nk", cands, d)
    k = np.argmax(score, axis=1)
    return cands[np.arange(len(t)), k], score[np.arange(len(t)), k]


def alignment_energy(mesh: TriMesh, field: OrientationField, adjacency=None) -> float:
    """Sum over adjacent faces of the squared cross-field mismatch."""
    pairs, shared = adjacency if adjacency is not None else face_adjacency(mesh)
    if len(pairs) == 0:
        return 0.0
    n = mesh.triangle_normals
    axis = _hinge_axes(mesh, shared)
    i, j = pairs[:, 0], pairs[:, 1]
    d = field.directions
    t = _transport(d[j], n[j], n[i], axis)
    _, score = _best_representative(t, n[i], d[i])
    return float(np.sum(2.0 - 2.0 * np.clip(score, -1.0, 1.0)))


def _hinge_axes(mesh, shared):
    e = mesh.vertices[shared[:, 1]] - mesh.vertices[shared[:, 0]]
    return e / np.linalg.norm(e, axis=1, keepdims=True)


def compute_orientation_field(mesh: TriMesh, smoothing_iters: int = 50) -> OrientationField:
    """Cross field initialized from longest edges, then smoothed across face neighbors.

    Smoothing is a Jacobi average of each face direction with the best
    matching 90-degree rotation of each neighbor's direction, transported
    across the shared edge. The returned field is the lowest-energy iterate,
    so the alignment energy never exceeds that of the initialization.
    """
    if mesh.n_triangles == 0 or not np.any(mesh.triangle_areas > 0):
        raise SubdivisionError("orientation field needs at least one non-degenerate triangle")
    v, f = mesh.vertices, mesh.triangles
    n = mesh.triangle_normals
    sides = np.stack([v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 1]], v[f[:, 0]] - v[f[:, 2]]], axis=1)
    longest = np.argmax(np.linalg.norm(sides, axis=2), axis=1)
    d = sides[np.arange(len(f)), longest]
    d = d - np.sum(d * n, axis=1, keepdims=True) * n
    d /= np.linalg.norm(d, axis=1, keepdims=True)

    pairs, shared = face_adjacency(mesh)
    if smoothing_iters <= 0 or len(pairs) == 0:
        return OrientationField(d)
    axis = _hinge_axes(mesh, shared)
    i, j = pairs[:, 0], pairs[:, 1]

    def energy(dirs):
        t = _transport(dirs[j], n[j], n[i], axis)
        _, s = _best_representative(t, n[i], dirs[i])
        return float(np.sum(2.0 - 2.0 * np.clip(s, -1.0, 1.0)))

    best, best_e = d, energy(d)
    for _ in range(smoothing_iters):
        acc = d.copy()
        r_ij, _ = _best_representative(_transport(d[j], n[j], n[i], axis), n[i], d[i])
        r_ji, _ = _best_representative(_transport(d[i], n[i], n[j], axis), n[j], d[j])
        np.add.at(acc, i, r_ij)
        np.add.at(acc, j, r_ji)
        acc -= np.sum(acc * n, axis=1, keepdims=True) * n
        norm = np.linalg.norm(acc, axis=1, keepdims=True)
        d = np.where(norm > 1e-12, acc / np.where(norm > 0, norm, 1.0), d)
        e = energy(d)
        if e <= best_e:
            best, best_e = d, e
    return OrientationField(best)


# --------------------------------------------------------------------------
# subdivision


def segment_count(edge_length: float, theta_l: float) -> int:
    """Number of uniform segments so that each is no longer than ``theta_l``."""
    if not (edge_length > 0 and theta_l > 0):
        raise ValueError("edge length and theta_l must be positive")
    return max(1, math.ceil(edge_length / theta_l))


def lattice_points(corners2d: np.ndarray, spacing: float, margin: float) -> np.ndarray:
    """Lattice nodes ``spacing * (i, j)`` strictly inside a CCW triangle, at least ``margin`` from its sides."""
    lo = corners2d.min(axis=0)
    hi = corners2d.max(axis=0)
    i = np.arange(math.ceil(lo[0] / spacing), math.floor(hi[0] / spacing) + 1)
    j = np.arange(math.ceil(lo[1] / spacing), math.floor(hi[1] / spacing) + 1)
    if len(i) == 0 or len(j) == 0:
        return np.zeros((0, 2))
    gi, gj = np.meshgrid(i, j, indexing="ij")
    pts = np.stack([gi.ravel(), gj.ravel()], axis=1) * spacing
    keep = np.ones(len(pts), dtype=bool)
    for k in range(3):
        a, b = corners2d[k], corners2d[(k + 1) % 3]
        e = b - a
        inward = np.array([-e[1], e[0]]) / np.linalg.norm(e)
        keep &= (pts - a) @ inward > margin
    return pts[keep]


def subdivide(mesh: TriMesh, field: OrientationField, theta_l: float) -> SubdividedMesh:
    """Resample every triangle so that no output edge is longer than ``theta_l``."""
    if theta_l <= 0:
        raise ValueError("theta_l must be positive")
    if len(field) != mesh.n_triangles:
        raise SubdivisionError("orientation field size does not match triangle count")

    v = mesh.vertices
    edges = mesh.edges
    n_orig = len(v)
    spacing = theta_l * LATTICE_FACTOR
    margin = BOUNDARY_MARGIN * theta_l

    new_pts: list[np.ndarray] = [v]
    kinds = [np.full(n_orig, ORIGIN_VERTEX)]
    index = [np.arange(n_orig)]
    params = [np.tile([1.0, 0.0, 0.0], (n_orig, 1))]

    # uniform segmentation, computed once per undirected edge
    edge_points: list[np.ndarray] = []
    next_id = n_orig
    lengths = np.linalg.norm(v[edges[:, 1]] - v[edges[:, 0]], axis=1)
    for e, ((a, b), length) in enumerate(zip(edges, lengths)):
        count = segment_count(length, theta_l)
        while True:
            t = np.arange(1, count) / count
            pts = v[a] + t[:, None] * (v[b] - v[a])
            chain = np.concatenate([v[a][None], pts, v[b][None]])
            # exact multiples of theta_l can round one ulp over the bound
            if np.linalg.norm(np.diff(chain, axis=0), axis=1).max() <= theta_l:
                break
            count += 1
        if count == 1:
            edge_points.append(np.zeros(0, dtype=np.int64))
            continue
        ids = np.arange(next_id, next_id + count - 1)
        next_id += count - 1
        edge_points.append(ids)
        new_pts.append(pts)
        kinds.append(np.full(count - 1, ORIGIN_EDGE))
        index.append(np.full(count - 1, e))
        params.append(np.stack([t, np.zeros_like(t), np.zeros_like(t)], axis=1))

    edge_key = {(int(a), int(b)): e for e, (a, b) in enumerate(edges)}
    all_pts = np.concatenate(new_pts)
    out_tris: list[np.ndarray] = []
    tri_src: list[np.ndarray] = []
    normals = mesh.triangle_normals

    for t_idx, corners in enumerate(mesh.triangles):
        loop = []
        for k in range(3):
            a, b = int(corners[k]), int(corners[(k + 1) % 3])
            ids = edge_points[edge_key[(min(a, b), max(a, b))]]
            loop.append(a)
            loop.extend(ids if a < b else ids[::-1])
        loop = np.asarray(loop, dtype=np.int64)

        origin = v[corners[0]]
        x_axis = field.directions[t_idx]
        y_axis = np.cross(normals[t_idx], x_axis)
        frame = np.stack([x_axis, y_axis], axis=1)
        corners2d = (v[corners] - origin) @ frame
        inner2d = lattice_points(corners2d, spacing, margin)

        if len(loop) == 3 and len(inner2d) == 0:
            out_tris.append(corners[None, :].copy())
            tri_src.append(np.array([t_idx]))
            continue

        boundary2d = (all_pts[loop] - origin) @ frame
        inner3d = origin + inner2d @ frame.T
        local_tris, inner2d, inner3d = _triangulate_patch(
            boundary2d, all_pts[loop], inner2d, inner3d, theta_l
        )
        n_inner = len(inner2d)
        ids = np.arange(next_id, next_id + n_inner)
        next_id += n_inner
        local_to_global = np.concatenate([loop, ids])
        out_tris.append(local_to_global[local_tris])
        tri_src.append(np.full(len(local_tris), t_idx))
        if n_inner:
            new_pts.append(inner3d)
            kinds.append(np.full(n_inner, ORIGIN_FACE))
            index.append(np.full(n_inner, t_idx))
            params.append(_barycentric(inner2d, corners2d))

    verts = np.concatenate(new_pts)
    tris = np.concatenate(out_tris) if out_tris else np.zeros((0, 3), dtype=np.int64)
    return SubdividedMesh(
        mesh=TriMesh(verts, tris),
        source=mesh,
        origin_kind=np.concatenate(kinds),
        origin_index=np.concatenate(index),
        origin_param=np.concatenate(params),
        triangle_source=np.concatenate(tri_src) if tri_src else np.zeros(0, dtype=np.int64),
        theta_l=theta_l,
    )


def _triangulate_patch(boundary2d, boundary3d, inner2d, inner3d, theta_l, max_rounds=64):
    """CDT of one face patch; long interior edges are split at their midpoints."""
    nb = len(boundary2d)
    segs = np.stack([np.arange(nb), (np.arange(nb) + 1) % nb], axis=1)
    for _ in range(max_rounds):
        pts2d = np.concatenate([boundary2d, inner2d])
        res = tr.triangulate({"vertices": pts2d, "segments": segs}, "pYQ")
        if len(res.get("vertices", ())) != len(pts2d) or "triangles" not in res:
            raise SubdivisionError("constrained Delaunay inserted or dropped vertices (degenerate patch)")
        local = np.asarray(res["triangles"], dtype=np.int64)
        pts3d = np.concatenate([boundary3d, inner3d])
        e = np.concatenate([local[:, [0, 1]], local[:, [1, 2]], local[:, [2, 0]]])
        e = np.unique(np.sort(e, axis=1), axis=0)
        on_boundary = (e[:, 1] < nb) & (
            (e[:, 1] - e[:, 0] == 1) | ((e[:, 0] == 0) & (e[:, 1] == nb - 1))
        )
        length = np.linalg.norm(pts3d[e[:, 0]] - pts3d[e[:, 1]], axis=1)
        long_edges = e[(length > theta_l) & ~on_boundary]
        if len(long_edges) == 0:
            return local, inner2d, inner3d
        inner2d = np.concatenate([inner2d, 0.5 * (pts2d[long_edges[:, 0]] + pts2d[long_edges[:, 1]])])
        inner3d = np.concatenate([inner3d, 0.5 * (pts3d[long_edges[:, 0]] + pts3d[long_edges[:, 1]])])
    raise SubdivisionError("edge-length refinement did not terminate")


def _barycentric(p2d, corners2d):
    a, b, c = corners2d
    m = np.array([[b[0] - a[0], c[0] - a[0]], [b[1] - a[1], c[1] - a[1]]])
    uv = np.linalg.solve(m, (p2d - a).T).T
    return np.stack([1.0 - uv[:, 0] - uv[:, 1], uv[:, 0], uv[:, 1]], axis=1)


def count_t_junctions(sub: SubdividedMesh) -> int:
    """Number of segment slots along source edges not matched by every incident patch.

    For a source edge cut into ``N`` segments and shared by ``k`` faces,
    a conforming result has each of the ``N`` segments appearing as a side of
    exactly ``k`` output triangles.
    """
    src = sub.source
    f = sub.triangles
    sides = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
    side_keys, side_counts = np.unique(sides, axis=0, return_counts=True)
    lookup = {(int(a), int(b)): int(c) for (a, b), c in zip(side_keys, side_counts)}

    incidence = np.zeros(len(src.edges), dtype=np.int64)
    sf = np.sort(np.concatenate([src.triangles[:, [0, 1]], src.triangles[:, [1, 2]], src.triangles[:, [2, 0]]]), axis=1)
    edge_key = {(int(a), int(b)): e for e, (a, b) in enumerate(src.edges)}
    for a, b in sf:
        incidence[edge_key[(int(a), int(b))]] += 1

    on_edge = np.flatnonzero(sub.origin_kind == ORIGIN_EDGE)
    by_edge: dict[int, list] = {}
    for vid in on_edge:
        by_edge.setdefault(int(sub.origin_index[vid]), []).append(vid)
    bad = 0
    for e, (a, b) in enumerate(src.edges):
        chain = [int(a)] + sorted(by_edge.get(e, []), key=lambda q: sub.origin_param[q, 0]) + [int(b)]
        for p, q in zip(chain[:-1], chain[1:]):
            if lookup.get((min(p, q), max(p, q)), 0) != incidence[e]:
                bad += 1
    return bad
