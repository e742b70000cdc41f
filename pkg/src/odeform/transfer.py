"""Transfer of a skeleton deformation to the dense mesh by a sparse quadratic solve."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import LinearOperator, cg

from .connectivity import SkeletonTemplate, VirtualLinkSet
from .energy import euler_matrices
from .spatial import NearestIndex


class TransferError(RuntimeError):
    pass


@dataclass
class TransferProblem:
    """Inputs of the transfer energy.

    ``rotations`` holds one 3x3 matrix per mesh vertex; build it from node
    angles with :func:`vertex_rotations`.
    """

    vertices: np.ndarray
    links: np.ndarray
    assignment: list
    targets: np.ndarray
    rotations: np.ndarray
    lam: float = 1.0

    @classmethod
    def from_skeleton(cls, vertices, links: VirtualLinkSet, skeleton: SkeletonTemplate,
                      deformed_nodes, node_angles, lam: float = 1.0) -> "TransferProblem":
        rot = vertex_rotations(vertices, skeleton.nodes, node_angles)
        return cls(np.asarray(vertices, dtype=np.float64), np.asarray(links.links), skeleton.assignment,
                   np.asarray(deformed_nodes, dtype=np.float64), rot, lam)


def vertex_rotations(vertices, nodes, node_angles) -> np.ndarray:
    """Rotation of the nearest rest-pose skeleton node for every vertex (ties to the lowest node)."""
    idx, _ = NearestIndex(nodes).query(np.asarray(vertices, dtype=np.float64))
    return euler_matrices(np.asarray(node_angles).reshape(-1, 3)[idx])


def _system(problem: TransferProblem):
    """Per-axis normal matrix and the three right-hand sides.

    The rotations only enter the right-hand side, so the 3N-variable system is
    block diagonal with three identical N x N blocks.
    """
    V = problem.vertices
    n = len(V)
    rows, cols, vals = [], [], []
    for i, members in enumerate(problem.assignment):
        members = np.asarray(members, dtype=np.int64)
        if len(members) == 0:
            raise TransferError(f"skeleton node {i} has no assigned vertices")
        rows.append(np.full(len(members), i))
        cols.append(members)
        vals.append(np.full(len(members), 1.0 / len(members)))
    A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(len(problem.assignment), n))
    e = np.sort(np.asarray(problem.links, dtype=np.int64).reshape(-1, 2), axis=1)
    m = len(e)
    B = sp.csr_matrix((np.concatenate([np.ones(m), -np.ones(m)]),
                       (np.concatenate([np.arange(m)] * 2), np.concatenate([e[:, 0], e[:, 1]]))),
                      shape=(m, n))
    R = np.asarray(problem.rotations)
    b = np.einsum("eab,eb->ea", R[e[:, 0]], V[e[:, 0]] - V[e[:, 1]])
    lam = problem.lam
    H = (A.T @ A + lam * (B.T @ B)).tocsr()
    rhs = A.T @ problem.targets + lam * (B.T @ b)
    return H, rhs, A, B, b


def transfer_energy(problem: TransferProblem, X: np.ndarray) -> float:
    _, _, A, B, b = _system(problem)
    r1 = problem.targets - A @ X
    r2 = B @ X - b
    return float(np.sum(r1 * r1) + problem.lam * np.sum(r2 * r2))


def transfer_gradient(problem: TransferProblem, X: np.ndarray) -> np.ndarray:
    _, _, A, B, b = _system(problem)
    return -2.0 * (A.T @ (problem.targets - A @ X)) + 2.0 * problem.lam * (B.T @ (B @ X - b))


def transfer_deformation(problem: TransferProblem, rtol: float = 1e-10, maxiter: int | None = None) -> np.ndarray:
    """Minimizer of the transfer energy via Jacobi-preconditioned CG, started from the rest vertices."""
    H, rhs, A, B, _ = _system(problem)
    n = H.shape[0]
    n_comp, comp = connected_components(B.T @ B + sp.identity(n, format="csr"), directed=False)
    anchored = np.zeros(n_comp, dtype=bool)
    anchored[comp[A.indices]] = True
    if not anchored.all():
        raise TransferError(f"{int((~anchored).sum())} link component(s) without assigned vertices: "
                            "singular transfer system")
    diag = H.diagonal()
    M = LinearOperator(H.shape, matvec=lambda v: v / diag)
    out = np.empty_like(problem.vertices)
    maxiter = maxiter or 20 * n
    for k in range(3):
        x0 = problem.vertices[:, k].copy()
        x, info = cg(H, rhs[:, k], x0=x0, rtol=rtol, atol=0.0, maxiter=maxiter, M=M)
        if info != 0:
            raise TransferError(f"conjugate gradients did not converge on axis {k}")
        out[:, k] = x
    return out
