"""Explicit deformation back-end: per-node positions and Euler angles solved by Levenberg-Marquardt."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, cg

from .connectivity import SkeletonTemplate
from .energy import (EnergyBreakdown, EnergyConfig, EnergyLog, EnergyState, euler_derivatives,
                     euler_matrices, total_energy)
from .spatial import DistanceGrid, NearestIndex, query_distance


class DivergenceError(RuntimeError):
    """Raised when an optimizer produces a non-finite energy."""


@dataclass
class ExplicitDeformation:
    nodes: np.ndarray
    angles: np.ndarray


@dataclass
class SolverReport:
    iterations: int
    initial: EnergyBreakdown
    final: EnergyBreakdown
    converged: bool
    wall_time: float
    log: EnergyLog = field(default_factory=EnergyLog, repr=False)

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "initial": vars(self.initial),
            "final": vars(self.final),
            "converged": self.converged,
            "wall_time": self.wall_time,
        }


@dataclass(frozen=True)
class LMParams:
    max_iters: int = 200
    rel_tol: float = 1e-6
    patience: int = 3
    mu_init: float = 1e-4
    mu_up: float = 10.0
    mu_down: float = 0.5
    max_rejections: int = 30
    cg_tol: float = 1e-10
    cg_maxiter: int = 2000
    # multipliers of lambda for warm-up solves run before the actual one; a stiff
    # start moves the skeleton almost rigidly before local correspondences take over
    stiffness_schedule: tuple[float, ...] = (1e4, 1e3, 100.0, 10.0)
    warmup_grid_only: bool = True
    # warm-up only has to reach the right basin, so it runs short and loose
    warmup_max_iters: int = 15
    warmup_rel_tol: float = 1e-3
    warmup_cg_tol: float = 1e-4
    warmup_cg_maxiter: int = 200


def _stack_rows(blocks, n_vars):
    rows, cols, vals, res = [], [], [], []
    offset = 0
    for r, c, v, b in blocks:
        rows.append(r + offset)
        cols.append(c)
        vals.append(v)
        res.append(b)
        offset += len(b)
    J = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(offset, n_vars))
    return J, np.concatenate(res)


def _point_block(src_ids, diff, n):
    """Residual rows ``x[src] - p`` (three per match)."""
    m = len(src_ids)
    rows = np.arange(3 * m)
    cols = (3 * np.repeat(src_ids, 3) + np.tile(np.arange(3), m))
    return rows, cols, np.ones(3 * m), diff.ravel()


def _linearize(x, angles, rest, edges, config: EnergyConfig, grid, target_nodes):
    """Stacked residuals and sparse Jacobian at the current state, correspondences frozen."""
    n = len(x)
    blocks = []
    if config.uses_forward:
        if config.part_aware:
            for lab in np.intersect1d(config.source_labels, config.target_labels):
                s = np.flatnonzero(config.source_labels == lab)
                t = target_nodes[config.target_labels == lab]
                idx, _ = NearestIndex(t).query(x[s])
                blocks.append(_point_block(s, x[s] - t[idx], n))
        else:
            d, g = query_distance(grid, x)
            rows = np.repeat(np.arange(n), 3)
            cols = np.arange(3 * n)
            blocks.append((rows, cols, g.ravel(), d))
    if config.uses_backward:
        if config.part_aware:
            for lab in np.intersect1d(config.source_labels, config.target_labels):
                s = np.flatnonzero(config.source_labels == lab)
                t = target_nodes[config.target_labels == lab]
                idx, _ = NearestIndex(x[s]).query(t)
                blocks.append(_point_block(s[idx], x[s][idx] - t, n))
        else:
            idx, _ = NearestIndex(x).query(target_nodes)
            blocks.append(_point_block(idx, x[idx] - target_nodes, n))
    if len(edges) and config.lam > 0:
        w = np.sqrt(config.lam)
        i, j = edges[:, 0], edges[:, 1]
        d_rest = rest[i] - rest[j]
        r = (x[i] - x[j]) - np.einsum("eab,eb->ea", euler_matrices(angles)[i], d_rest)
        dr = -np.einsum("ekab,eb->eak", euler_derivatives(angles)[i], d_rest)  # (e, row, angle)
        m = len(edges)
        rr = np.arange(3 * m)
        comp = np.tile(np.arange(3), m)
        rows = np.concatenate([rr, rr, np.repeat(rr, 3)])
        cols = np.concatenate([
            3 * np.repeat(i, 3) + comp,
            3 * np.repeat(j, 3) + comp,
            3 * n + 3 * np.repeat(np.repeat(i, 3), 3) + np.tile(np.arange(3), 3 * m),
        ])
        vals = np.concatenate([np.full(3 * m, w), np.full(3 * m, -w), w * dr.ravel()])
        blocks.append((rows, cols, vals, w * r.ravel()))
    if not blocks:
        return sp.csr_matrix((0, 6 * n)), np.zeros(0)
    return _stack_rows(blocks, 6 * n)


def _solve_damped(H, g, mu, params: LMParams):
    A = H + mu * sp.identity(H.shape[0], format="csr")
    diag = A.diagonal()
    M = LinearOperator(A.shape, matvec=lambda v: v / diag)
    step, _ = cg(A, -g, rtol=params.cg_tol, atol=0.0, maxiter=params.cg_maxiter, M=M)
    return step


def _lm_solve(x, ang, rest, edges, config: EnergyConfig, grid, tn, params: LMParams, log: EnergyLog,
              it0: int = 0):
    """One Levenberg-Marquardt run from ``(x, ang)``; returns the new state and iteration count."""
    n = len(x)

    def evaluate(xx, aa):
        return total_energy(EnergyState(xx, rest, edges, aa, grid, tn), config)

    current = evaluate(x, ang)
    if not np.isfinite(current.total):
        raise DivergenceError("non-finite initial energy")
    mu = params.mu_init
    small = 0
    converged = False
    it = 0
    while it < params.max_iters:
        it += 1
        J, r = _linearize(x, ang, rest, edges, config, grid, tn)
        H = (J.T @ J).tocsr()
        g = J.T @ r
        if not np.any(g):
            converged = True
            break
        accepted = False
        for _ in range(params.max_rejections):
            step = _solve_damped(H, g, mu, params)
            xn = x + step[:3 * n].reshape(n, 3)
            an = ang + step[3 * n:].reshape(n, 3)
            trial = evaluate(xn, an)
            if not np.isfinite(trial.total):
                raise DivergenceError(f"non-finite energy at iteration {it0 + it}")
            if trial.total <= current.total:
                accepted = True
                break
            mu *= params.mu_up
        if not accepted:
            converged = True
            break
        mu = max(mu * params.mu_down, 1e-15)
        rel = (current.total - trial.total) / max(current.total, 1e-300)
        x, ang, current = xn, an, trial
        log.append(it0 + it, current)
        small = small + 1 if rel < params.rel_tol else 0
        if small >= params.patience or current.total == 0.0:
            converged = True
            break
    return x, ang, it, converged


def optimize_explicit(skeleton: SkeletonTemplate, target_grid: DistanceGrid | None = None,
                      target_nodes: np.ndarray | None = None, config: EnergyConfig = EnergyConfig(),
                      params: LMParams = LMParams()) -> tuple[ExplicitDeformation, SolverReport]:
    """Minimize fitting plus ``lam`` times rigidity over node positions and angles.

    Correspondences and grid gradients are frozen while a step is being
    accepted or rejected, and refreshed after every accepted step. A step is
    accepted only if the freshly evaluated total energy does not increase.
    When ``lam > 0`` the solve is preceded by warm-up solves with ``lam``
    scaled by ``params.stiffness_schedule``; the energy log of the retained
    run holds each stage's own objective, non-increasing within the stage.
    ``iterations`` counts every LM iteration spent, over all runs.
    """
    t0 = time.perf_counter()
    rest = np.asarray(skeleton.nodes, dtype=np.float64)
    edges = np.sort(np.asarray(skeleton.edges, dtype=np.int64).reshape(-1, 2), axis=1)
    tn = None if target_nodes is None else np.asarray(target_nodes, dtype=np.float64).reshape(-1, 3)
    if tn is not None and not np.isfinite(tn).all():
        raise ValueError("target nodes must be finite")
    n = len(rest)
    x = rest.copy()
    ang = np.zeros((n, 3))

    def evaluate(xx, aa):
        return total_energy(EnergyState(xx, rest, edges, aa, target_grid, tn), config)

    initial = evaluate(x, ang)
    if not np.isfinite(initial.total):
        raise DivergenceError("non-finite initial energy")
    # Warm-up schedules are tried in turn and the one ending at the lowest true
    # energy wins. Grid-only warm-up has no spurious minima at lattice-aligned
    # offsets, where nearest-node matching stalls, but alone it can pull a closed
    # shape onto part of the target, so the full-fitting schedule is tried too.
    schedules = []
    if config.lam > 0 and params.stiffness_schedule:
        if params.warmup_grid_only and config.uses_forward and config.uses_backward and not config.part_aware:
            schedules.append([replace(config, lam=config.lam * k, fitting_mode="forward")
                              for k in params.stiffness_schedule])
        schedules.append([replace(config, lam=config.lam * k) for k in params.stiffness_schedule])
    warm_params = replace(params, max_iters=min(params.max_iters, params.warmup_max_iters),
                          rel_tol=max(params.rel_tol, params.warmup_rel_tol),
                          cg_tol=max(params.cg_tol, params.warmup_cg_tol),
                          cg_maxiter=min(params.cg_maxiter, params.warmup_cg_maxiter))
    iterations = 0
    best = None
    for stages in schedules + [[]]:
        if not stages and best is not None and best[2].total <= initial.total:
            break  # the plain solve from rest is only a fallback
        log = EnergyLog()
        log.append(0, initial)
        xs, angs, used = rest.copy(), np.zeros((n, 3)), 0
        for stage_config in stages + [config]:
            stage_params = params if stage_config is config else replace(
                warm_params, mu_init=params.mu_init * stage_config.lam / config.lam)
            xs, angs, it, converged = _lm_solve(xs, angs, rest, edges, stage_config, target_grid, tn,
                                                stage_params, log, used)
            used += it
        iterations += used
        cand = evaluate(xs, angs)
        if best is None or cand.total < best[2].total:
            best = (xs, angs, cand, converged, log)
    x, ang, final, converged, log = best
    report = SolverReport(iterations, initial, final, converged, time.perf_counter() - t0, log)
    return ExplicitDeformation(x, ang), report
