"""Virtual links between nearby vertices and the voxel-clustered skeleton graph."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import Delaunay, QhullError, cKDTree

from .mesh import TriMesh
from .subdivision import SubdividedMesh

FLAT_TOL = 1e-9
FALLBACK_KNN = 6


@dataclass(frozen=True, eq=False)
class VirtualLinkSet:
    """Undirected vertex pairs, sorted rows ``(i, j)`` with ``i < j``."""

    links: np.ndarray

    def __len__(self) -> int:
        return len(self.links)


@dataclass(frozen=True, eq=False)
class SkeletonTemplate:
    """Graph proxy of a dense mesh.

    ``nodes[i]`` is the mean of ``vertices[assignment[i]]``; ``edges`` are
    sorted unique node pairs; ``vertex_node`` is the inverse of
    ``assignment``.
    """

    nodes: np.ndarray
    edges: np.ndarray
    assignment: list[np.ndarray]
    vertex_node: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def to_json(self) -> str:
        return json.dumps({
            "nodes": self.nodes.tolist(),
            "edges": self.edges.tolist(),
            "assignment": [a.tolist() for a in self.assignment],
        })

    @classmethod
    def from_json(cls, text: str) -> "SkeletonTemplate":
        d = json.loads(text)
        assignment = [np.asarray(a, dtype=np.int64) for a in d["assignment"]]
        n_vertices = sum(len(a) for a in assignment)
        vertex_node = np.full(n_vertices, -1, dtype=np.int64)
        for i, a in enumerate(assignment):
            vertex_node[a] = i
        return cls(
            nodes=np.asarray(d["nodes"], dtype=np.float64).reshape(-1, 3),
            edges=np.asarray(d["edges"], dtype=np.int64).reshape(-1, 2),
            assignment=assignment,
            vertex_node=vertex_node,
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "SkeletonTemplate":
        return cls.from_json(Path(path).read_text())


def voxel_keys(points: np.ndarray, theta: float) -> np.ndarray:
    """Integer voxel coordinates; points on a voxel face go to the lower voxel."""
    s = np.asarray(points, dtype=np.float64) / theta
    k = np.ceil(s).astype(np.int64) - 1
    # the lower face of voxel 0 has nowhere lower to go
    return np.where(s == 0.0, 0, k)


def _as_mesh(mesh) -> TriMesh:
    return mesh.mesh if isinstance(mesh, SubdividedMesh) else mesh


def _local_edges(pts: np.ndarray) -> np.ndarray:
    """Delaunay edges of a small point set, degrading gracefully on flat input.

    Full-rank sets use 3D Delaunay; coplanar sets are triangulated in their
    plane; collinear sets are chained in order along the line.
    """
    n = len(pts)
    if n < 2:
        return np.zeros((0, 2), dtype=np.int64)
    if n == 2:
        return np.array([[0, 1]])
    centered = pts - pts.mean(axis=0)
    _, sv, vt = np.linalg.svd(centered, full_matrices=False)
    scale = max(sv[0], 1e-300)
    rank = int(np.sum(sv > FLAT_TOL * scale))
    simplices = None
    try:
        if rank == 3 and n >= 4:
            simplices = Delaunay(pts).simplices
        elif rank >= 2 and n >= 3:
            simplices = Delaunay(centered @ vt[:2].T).simplices
    except QhullError:
        simplices = None
    if simplices is not None:
        k = simplices.shape[1]
        e = np.concatenate([simplices[:, [a, b]] for a in range(k) for b in range(a + 1, k)])
        return np.unique(np.sort(e, axis=1), axis=0)
    if rank <= 1:
        order = np.argsort(centered @ vt[0], kind="stable")
        return np.sort(np.stack([order[:-1], order[1:]], axis=1), axis=1)
    if n <= 8:
        i, j = np.triu_indices(n, 1)
        return np.stack([i, j], axis=1)
    _, nbr = cKDTree(pts).query(pts, k=min(FALLBACK_KNN + 1, n))
    e = np.stack([np.repeat(np.arange(n), nbr.shape[1] - 1), nbr[:, 1:].ravel()], axis=1)
    e = np.sort(e, axis=1)
    return np.unique(e[e[:, 0] != e[:, 1]], axis=0)


def build_virtual_links(mesh, theta_d: float = 0.015) -> VirtualLinkSet:
    """Mesh edges plus short Delaunay edges between nearby (possibly disconnected) vertices."""
    m = _as_mesh(mesh)
    if theta_d <= 0:
        raise ValueError("theta_d must be positive")
    v = m.vertices
    if len(v) < 2:
        raise ValueError("virtual links need at least two vertices")
    keys = voxel_keys(v, theta_d)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = np.argsort(inverse, kind="stable")
    bounds = np.searchsorted(inverse[order], np.arange(len(uniq) + 1))
    members = {tuple(k): order[bounds[i]:bounds[i + 1]] for i, k in enumerate(uniq.tolist())}

    found = [m.edges]
    for key in uniq.tolist():
        x, y, z = key
        gather = [members[(x, y, z)]]
        for nb_key in ((x + 1, y, z), (x, y + 1, z), (x, y, z + 1)):
            ids = members.get(nb_key)
            if ids is not None:
                gather.append(ids)
        ids = np.concatenate(gather)
        if len(ids) < 2:
            continue
        local = _local_edges(v[ids])
        if len(local) == 0:
            continue
        e = ids[local]
        length = np.linalg.norm(v[e[:, 0]] - v[e[:, 1]], axis=1)
        found.append(np.sort(e[length < theta_d], axis=1))
    links = np.concatenate(found)
    links = links[links[:, 0] != links[:, 1]]
    return VirtualLinkSet(np.unique(links, axis=0))


def build_skeleton(mesh, links: VirtualLinkSet, theta_g: float = 0.01) -> SkeletonTemplate:
    """One node per occupied voxel (mean of its vertices); links between voxels become edges."""
    m = _as_mesh(mesh)
    if theta_g <= 0:
        raise ValueError("theta_g must be positive")
    v = m.vertices
    if len(v) == 0:
        raise ValueError("cannot build a skeleton for an empty mesh")
    _, vertex_node = np.unique(voxel_keys(v, theta_g), axis=0, return_inverse=True)
    vertex_node = vertex_node.reshape(-1).astype(np.int64)
    n = int(vertex_node.max()) + 1
    counts = np.bincount(vertex_node, minlength=n)
    nodes = np.zeros((n, 3))
    np.add.at(nodes, vertex_node, v)
    nodes /= counts[:, None]

    order = np.argsort(vertex_node, kind="stable")
    bounds = np.concatenate([[0], np.cumsum(counts)])
    assignment = [order[bounds[i]:bounds[i + 1]] for i in range(n)]

    e = vertex_node[links.links] if len(links) else np.zeros((0, 2), dtype=np.int64)
    e = np.sort(e, axis=1)
    e = e[e[:, 0] != e[:, 1]]
    edges = np.unique(e, axis=0) if len(e) else np.zeros((0, 2), dtype=np.int64)
    return SkeletonTemplate(nodes=nodes, edges=edges, assignment=assignment, vertex_node=vertex_node)


def save_links(path: str | Path, links: VirtualLinkSet) -> None:
    np.savetxt(path, links.links, fmt="%d")


def load_links(path: str | Path) -> VirtualLinkSet:
    return VirtualLinkSet(np.loadtxt(path, dtype=np.int64, ndmin=2).reshape(-1, 2))
