"""Fitting and rigidity energies with analytic gradients.

Rotations are Euler angles ``(a, b, c)`` about x, y and z, composed as
``Rz(c) @ Ry(b) @ Rx(a)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .spatial import DistanceGrid, NearestIndex, query_distance

FITTING_MODES = ("forward", "backward", "both")


def euler_matrices(angles: np.ndarray) -> np.ndarray:
    """Rotation matrices, shape ``(n, 3, 3)``, for angle triples ``(n, 3)``."""
    a = np.asarray(angles, dtype=np.float64).reshape(-1, 3)
    ca, cb, cc = np.cos(a).T
    sa, sb, sc = np.sin(a).T
    R = np.empty((len(a), 3, 3))
    R[:, 0, 0] = cc * cb
    R[:, 0, 1] = cc * sb * sa - sc * ca
    R[:, 0, 2] = cc * sb * ca + sc * sa
    R[:, 1, 0] = sc * cb
    R[:, 1, 1] = sc * sb * sa + cc * ca
    R[:, 1, 2] = sc * sb * ca - cc * sa
    R[:, 2, 0] = -sb
    R[:, 2, 1] = cb * sa
    R[:, 2, 2] = cb * ca
    return R


def euler_derivatives(angles: np.ndarray) -> np.ndarray:
    """``dR/d angle_k`` for each k, shape ``(n, 3, 3, 3)`` indexed ``[node, k, row, col]``."""
    a = np.asarray(angles, dtype=np.float64).reshape(-1, 3)
    ca, cb, cc = np.cos(a).T
    sa, sb, sc = np.sin(a).T
    z = np.zeros_like(ca)
    d = np.empty((len(a), 3, 3, 3))
    # d/da
    d[:, 0] = np.stack([
        np.stack([z, cc * sb * ca + sc * sa, -cc * sb * sa + sc * ca], -1),
        np.stack([z, sc * sb * ca - cc * sa, -sc * sb * sa - cc * ca], -1),
        np.stack([z, cb * ca, -cb * sa], -1),
    ], 1)
    # d/db
    d[:, 1] = np.stack([
        np.stack([-cc * sb, cc * cb * sa, cc * cb * ca], -1),
        np.stack([-sc * sb, sc * cb * sa, sc * cb * ca], -1),
        np.stack([-cb, -sb * sa, -sb * ca], -1),
    ], 1)
    # d/dc
    d[:, 2] = np.stack([
        np.stack([-sc * cb, -sc * sb * sa - cc * ca, -sc * sb * ca + cc * sa], -1),
        np.stack([cc * cb, cc * sb * sa - sc * ca, cc * sb * ca + sc * sa], -1),
        np.stack([z, z, z], -1),
    ], 1)
    return d


def matrix_to_euler(R: np.ndarray) -> np.ndarray:
    """Inverse of :func:`euler_matrices` away from gimbal lock (|b| < pi/2)."""
    R = np.asarray(R, dtype=np.float64).reshape(-1, 3, 3)
    b = -np.arcsin(np.clip(R[:, 2, 0], -1.0, 1.0))
    a = np.arctan2(R[:, 2, 1], R[:, 2, 2])
    c = np.arctan2(R[:, 1, 0], R[:, 0, 0])
    return np.stack([a, b, c], axis=1)


def fitting_forward(deformed_nodes: np.ndarray, grid: DistanceGrid) -> tuple[float, np.ndarray]:
    """Sum of squared grid distances of the deformed nodes to the target, and its gradient."""
    d, g = query_distance(grid, np.asarray(deformed_nodes).reshape(-1, 3))
    return float(np.sum(d * d)), 2.0 * d[:, None] * g


def fitting_backward(target_nodes: np.ndarray, deformed_nodes: np.ndarray) -> tuple[float, np.ndarray]:
    """Sum over target nodes of squared distance to the nearest deformed node.

    A fresh :class:`NearestIndex` is built on ``deformed_nodes`` on every call.
    """
    src = np.asarray(deformed_nodes, dtype=np.float64).reshape(-1, 3)
    if len(src) == 0:
        raise ValueError("backward fitting needs at least one deformed node")
    tgt = np.asarray(target_nodes, dtype=np.float64).reshape(-1, 3)
    grad = np.zeros_like(src)
    if len(tgt) == 0:
        return 0.0, grad
    idx, _ = NearestIndex(src).query(tgt)
    diff = src[idx] - tgt
    value = float(np.sum(diff * diff))
    for k in range(3):
        grad[:, k] = np.bincount(idx, weights=2.0 * diff[:, k], minlength=len(src))
    return value, grad


def rigidity_residuals(deformed_nodes, rest_nodes, edges, angles) -> np.ndarray:
    """Per-edge vectors ``(v*_i - v*_j) - R_i (v_i - v_j)`` with ``i < j``."""
    e = np.sort(np.asarray(edges, dtype=np.int64).reshape(-1, 2), axis=1)
    i, j = e[:, 0], e[:, 1]
    x = np.asarray(deformed_nodes, dtype=np.float64)
    v = np.asarray(rest_nodes, dtype=np.float64)
    R = euler_matrices(angles)
    return (x[i] - x[j]) - np.einsum("eab,eb->ea", R[i], v[i] - v[j])


def rigidity(deformed_nodes, rest_nodes, edges, angles) -> tuple[float, np.ndarray, np.ndarray]:
    """Rigidity energy with gradients w.r.t. deformed nodes and Euler angles."""
    x = np.asarray(deformed_nodes, dtype=np.float64).reshape(-1, 3)
    v = np.asarray(rest_nodes, dtype=np.float64).reshape(-1, 3)
    ang = np.asarray(angles, dtype=np.float64).reshape(-1, 3)
    if not (len(x) == len(v) == len(ang)):
        raise ValueError("deformed nodes, rest nodes and angles must have equal length")
    e = np.sort(np.asarray(edges, dtype=np.int64).reshape(-1, 2), axis=1)
    gx = np.zeros_like(x)
    ga = np.zeros_like(ang)
    if len(e) == 0:
        return 0.0, gx, ga
    i, j = e[:, 0], e[:, 1]
    rest = v[i] - v[j]
    r = (x[i] - x[j]) - np.einsum("eab,eb->ea", euler_matrices(ang)[i], rest)
    dR = euler_derivatives(ang)[i]
    # d r / d angle_k = -dR_k rest
    dr = -np.einsum("ekab,eb->eka", dR, rest)
    n = len(x)
    for k in range(3):
        gx[:, k] = np.bincount(i, weights=2 * r[:, k], minlength=n) - np.bincount(j, weights=2 * r[:, k], minlength=n)
        ga[:, k] = np.bincount(i, weights=2 * np.einsum("ea,ea->e", r, dr[:, k]), minlength=n)
    return float(np.sum(r * r)), gx, ga


def part_aware_fitting(deformed_nodes, node_labels, target_points, target_labels,
                       direction: str = "backward") -> tuple[float, np.ndarray]:
    """Fitting measured separately per semantic label.

    ``direction="backward"`` sums, over target points, the squared distance to
    the nearest deformed node carrying the same label; ``"forward"`` sums, over
    deformed nodes, the squared distance to the nearest same-label target point.
    Labels present on only one side contribute zero.
    """
    src = np.asarray(deformed_nodes, dtype=np.float64).reshape(-1, 3)
    tgt = np.asarray(target_points, dtype=np.float64).reshape(-1, 3)
    sl = np.asarray(node_labels).reshape(-1)
    tl = np.asarray(target_labels).reshape(-1)
    if len(sl) != len(src) or len(tl) != len(tgt):
        raise ValueError("label arrays must align with their point sets")
    grad = np.zeros_like(src)
    value = 0.0
    for lab in np.intersect1d(sl, tl):
        s_ids = np.flatnonzero(sl == lab)
        t_ids = np.flatnonzero(tl == lab)
        if direction == "backward":
            val, g = fitting_backward(tgt[t_ids], src[s_ids])
            grad[s_ids] += g
        elif direction == "forward":
            idx, _ = NearestIndex(tgt[t_ids]).query(src[s_ids])
            diff = src[s_ids] - tgt[t_ids][idx]
            val = float(np.sum(diff * diff))
            grad[s_ids] += 2.0 * diff
        else:
            raise ValueError(f"unknown direction {direction!r}")
        value += val
    return value, grad


@dataclass(frozen=True)
class EnergyConfig:
    """Weights and fitting mode of the single-direction deformation energy.

    ``source_labels`` label the source skeleton nodes and ``target_labels`` the
    target skeleton nodes; when both are given, fitting is part-aware.
    """

    lam: float = 1.0
    fitting_mode: str = "forward"
    source_labels: np.ndarray | None = None
    target_labels: np.ndarray | None = None

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError("lambda must be non-negative")
        if self.fitting_mode not in FITTING_MODES:
            raise ValueError(f"fitting_mode must be one of {FITTING_MODES}")
        if (self.source_labels is None) != (self.target_labels is None):
            raise ValueError("part-aware fitting needs labels on both sides")

    @property
    def uses_forward(self) -> bool:
        return self.fitting_mode in ("forward", "both")

    @property
    def uses_backward(self) -> bool:
        return self.fitting_mode in ("backward", "both")

    @property
    def part_aware(self) -> bool:
        return self.source_labels is not None


@dataclass
class EnergyState:
    """Snapshot of everything one energy evaluation reads."""

    deformed_nodes: np.ndarray
    rest_nodes: np.ndarray
    edges: np.ndarray
    angles: np.ndarray
    target_grid: DistanceGrid | None = None
    target_nodes: np.ndarray | None = None


@dataclass(frozen=True)
class EnergyBreakdown:
    fitting_forward: float
    fitting_backward: float
    rigidity: float
    lam: float
    total: float

    def as_row(self) -> list[float]:
        return [self.fitting_forward, self.fitting_backward, self.rigidity, self.total]


@dataclass
class EnergyGradient:
    nodes: np.ndarray
    angles: np.ndarray


def total_energy(state: EnergyState, config: EnergyConfig, with_grad: bool = False):
    """Active fitting terms plus ``lam`` times rigidity.

    Returns an :class:`EnergyBreakdown`, or ``(breakdown, EnergyGradient)`` when
    ``with_grad`` is set.
    """
    x = np.asarray(state.deformed_nodes, dtype=np.float64).reshape(-1, 3)
    gx = np.zeros_like(x)
    ef = eb = 0.0
    if config.uses_forward:
        if config.part_aware:
            if state.target_nodes is None:
                raise ValueError("part-aware forward fitting needs target nodes")
            ef, g = part_aware_fitting(x, config.source_labels, state.target_nodes,
                                       config.target_labels, "forward")
        else:
            if state.target_grid is None:
                raise ValueError("forward fitting needs a target distance grid")
            ef, g = fitting_forward(x, state.target_grid)
        gx += g
    if config.uses_backward:
        if state.target_nodes is None:
            raise ValueError("backward fitting needs target skeleton nodes")
        if config.part_aware:
            eb, g = part_aware_fitting(x, config.source_labels, state.target_nodes,
                                       config.target_labels, "backward")
        else:
            eb, g = fitting_backward(state.target_nodes, x)
        gx += g
    er, grx, gra = rigidity(x, state.rest_nodes, state.edges, state.angles)
    gx += config.lam * grx
    total = ef + eb + config.lam * er
    out = EnergyBreakdown(ef, eb, er, config.lam, total)
    if with_grad:
        return out, EnergyGradient(gx, config.lam * gra)
    return out


def two_way_energy(state_ab: EnergyState, state_ba: EnergyState, config: EnergyConfig,
                   config_ba: EnergyConfig | None = None) -> float:
    """``E(A -> B, D) + E(B -> A, D^-1)``; ``config_ba`` defaults to ``config``
    with the label roles swapped."""
    if state_ab is None or state_ba is None:
        raise ValueError("two-way energy needs both deformation directions")
    if config_ba is None:
        config_ba = EnergyConfig(config.lam, config.fitting_mode,
                                 config.target_labels, config.source_labels)
    return total_energy(state_ab, config).total + total_energy(state_ba, config_ba).total


def load_labels(path: str | Path) -> np.ndarray:
    """One integer label per line, aligned with mesh vertex order."""
    lines = [ln.strip() for ln in Path(path).read_text().splitlines()]
    return np.array([int(ln) for ln in lines if ln], dtype=np.int64)


def node_labels(vertex_labels: np.ndarray, assignment) -> np.ndarray:
    """Majority label of each skeleton node's assigned vertices (ties to the smallest label)."""
    vl = np.asarray(vertex_labels, dtype=np.int64)
    out = np.empty(len(assignment), dtype=np.int64)
    for i, members in enumerate(assignment):
        labs, counts = np.unique(vl[members], return_counts=True)
        out[i] = labs[np.argmax(counts)]
    return out


@dataclass
class EnergyLog:
    """Per-iteration energy rows, written as ``iter,E_Da,E_Db,E_R,total``."""

    rows: list = field(default_factory=list)

    def append(self, iteration: int, breakdown: EnergyBreakdown) -> None:
        self.rows.append([iteration, *breakdown.as_row()])

    def write(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "E_Da", "E_Db", "E_R", "total"])
            for r in self.rows:
                w.writerow([r[0]] + [repr(float(x)) for x in r[1:]])
