"""The ten acceptance criteria, each printing one PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -s`` to see the lines inline; they are
also repeated in the terminal summary.
"""

import time

import numpy as np
import pytest
import torch
from oracles import (brute_chamfer, brute_intersections_fast, brute_nearest, dense_transfer, euler_richardson,
                     point_triangle_dist)
from suiteruns import PAIR_NAMES, ratio, suite_run
from test_explicit import random_rigid_motion, random_skeleton
from test_subdivision import _check_contract

import gradcases
from odeform.energy import EnergyConfig, matrix_to_euler, rigidity
from odeform.explicit import optimize_explicit
from odeform.flow import IntegratorConfig, bijection_error, integrate_forward
from odeform.mesh import TriMesh
from odeform.metrics import count_self_intersections, two_way_chamfer
from odeform.pipeline import PipelineConfig, execute
from odeform.spatial import build_distance_grid, build_nearest_index, point_mesh_distance, query_distance
from odeform.subdivision import compute_orientation_field, subdivide
from odeform.suite import BENCH_SETTINGS, icosphere, large_pair, suite_pairs
from odeform.transfer import TransferProblem, transfer_deformation

pytestmark = pytest.mark.slow

RESULTS: dict[int, str] = {}


def record(n, ok, detail):
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


def test_01_bijection():
    stats, elapsed = [], 0.0
    for name in PAIR_NAMES:
        run = suite_run(name, "flow")
        elapsed += sum(run.report.stage_times.values())
        mx80, _ = bijection_error(run.net, run.source.skeleton.nodes, IntegratorConfig(80))
        stats.append((run.report.bijection_max, run.report.bijection_mean, mx80))
    mx, mean, mx80 = (max(s[k] for s in stats) for k in range(3))
    ok = mx <= 1e-3 and mean <= 1e-4 and mx80 <= 1e-4 and elapsed <= 300
    record(1, ok, f"max {mx:.2e}, mean {mean:.2e}, max@80 {mx80:.2e}, runtime {elapsed:.1f}s")


def test_02_subdivision_contract():
    theta_l = 0.02
    t0 = time.perf_counter()
    failures = []
    for pair in suite_pairs():
        for side, mesh in (("source", pair.source), ("target", pair.target)):
            sub = subdivide(mesh, compute_orientation_field(mesh), theta_l)
            try:
                _check_contract(mesh, sub, theta_l)
            except AssertionError:
                failures.append(f"{pair.name}/{side}")
    elapsed = time.perf_counter() - t0
    record(2, not failures, f"10 meshes, failures {failures or 'none'}, {elapsed:.1f}s")


def test_03_rigidity_zero_on_rigid_motion():
    rng = np.random.default_rng(2024)
    analytic, recovered = [], []
    for _ in range(20):
        sk = random_skeleton(rng, int(rng.integers(20, 80)))
        move = random_rigid_motion(rng)
        moved = move(sk.nodes)
        # recover R from the motion of the basis vectors
        R = (move(np.eye(3) + 0.5) - move(np.full((1, 3), 0.5))).T
        angles = np.tile(matrix_to_euler(R), (sk.n_nodes, 1))
        analytic.append(rigidity(moved, sk.nodes, sk.edges, angles)[0])
        d, _ = optimize_explicit(sk, None, moved, EnergyConfig(1.0, "backward"))
        recovered.append(rigidity(d.nodes, sk.nodes, sk.edges, d.angles)[0])
    ok = max(analytic) <= 1e-10 and max(recovered) <= 1e-4
    record(3, ok, f"analytic E_R max {max(analytic):.1e}, solver E_R max {max(recovered):.1e}")


def test_04_gradient_suite():
    families = {
        "E_Da": gradcases.forward_fitting_errors,
        "E_Db": gradcases.backward_fitting_errors,
        "E_R": gradcases.rigidity_errors,
        "E_L": gradcases.transfer_errors,
        "flow": gradcases.flow_loss_errors,
    }
    worst = {k: max(f(100, seed=100 + i)) for i, (k, f) in enumerate(families.items())}
    ok = all(v <= 1e-4 for v in worst.values())
    record(4, ok, "100 configs each, worst rel. error " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))


def test_05_fitting_improvement():
    flow = {n: ratio(suite_run(n, "flow")) for n in PAIR_NAMES}
    explicit = {n: ratio(suite_run(n, "explicit")) for n in PAIR_NAMES}
    ok = max(flow.values()) <= 0.25 and max(explicit.values()) <= 0.40
    ordering = sum(flow[n] < explicit[n] for n in PAIR_NAMES)
    detail = ", ".join(f"{n} {flow[n]:.3f}/{explicit[n]:.3f}" for n in PAIR_NAMES)
    record(5, ok, f"flow/explicit ratios: {detail} (flow better on {ordering}/5, informational)")


def _crop(mesh, n, center):
    c = mesh.vertices[mesh.triangles].mean(1)
    keep = np.argsort(np.linalg.norm(c - center, axis=1), kind="stable")[:n]
    return TriMesh(mesh.vertices, mesh.triangles[keep])


def test_06_self_intersection_freedom():
    run = suite_run("plate_bend", "flow")
    new = run.report.new_self_intersections
    # the counter itself, against the all-pairs oracle on 2000-triangle crops
    checks = []
    deformed = run.deformed_mesh
    for center in ([0.5, 0.5, 0.35], [0.3, 0.3, 0.45]):
        crop = _crop(deformed, 2000, np.array(center))
        checks.append((count_self_intersections(crop), brute_intersections_fast(crop.vertices, crop.triangles)))
    rng = np.random.default_rng(6)
    c = rng.random((2000, 1, 3))
    soup = TriMesh((c + 0.1 * (rng.random((2000, 3, 3)) - 0.5)).reshape(-1, 3), np.arange(6000).reshape(-1, 3))
    checks.append((count_self_intersections(soup), brute_intersections_fast(soup.vertices, soup.triangles)))
    ok = new == 0 and all(a == b for a, b in checks)
    record(6, ok, f"new intersections {new}, counter vs oracle {checks}")


def test_07_bidirectional_parity():
    ratios = {}
    for name in PAIR_NAMES:
        two = suite_run(name, "flow").extras["energy_ab"]
        one = suite_run(name, "flow", bidirectional=False).extras["energy_ab"]
        ratios[name] = two / one
    ok = max(ratios.values()) <= 2.0
    record(7, ok, "E_ab two-way/one-way: " + ", ".join(f"{n} {r:.2f}" for n, r in ratios.items()))


def test_08_transfer_exactness():
    run = suite_run("box_taper", "explicit")
    A = run.source
    prob = TransferProblem.from_skeleton(A.subdivided.vertices, A.links, A.skeleton, A.skeleton.nodes,
                                         np.zeros((A.skeleton.n_nodes, 3)))
    ident = np.abs(transfer_deformation(prob) - A.subdivided.vertices).max()
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(30):
        p = gradcases.random_transfer_problem(rng, int(rng.integers(5, 51)), int(rng.integers(1, 6)))
        ref = dense_transfer(p.vertices, p.links, p.assignment, p.targets, p.rotations, p.lam)
        worst = max(worst, np.abs(transfer_deformation(p) - ref).max())
    ok = ident <= 1e-9 and worst <= 1e-8
    record(8, ok, f"identity error {ident:.1e} ({len(A.subdivided.vertices)} vertices), dense-oracle error {worst:.1e}")


def test_09_oracle_equivalences():
    rng = np.random.default_rng(9)
    pts = rng.random((400, 3))
    pts[200:] = np.round(pts[:200] * 8) / 8  # lattice points: many exact ties
    q = np.vstack([rng.random((200, 3)), np.round(rng.random((100, 3)) * 8) / 8])
    idx, _ = build_nearest_index(pts).query(q)
    nn_ok = all(i == brute_nearest(pts, x)[0] for i, x in zip(idx, q))

    a, b = rng.random((300, 3)), rng.random((250, 3))
    # same nearest neighbours; the sums differ only in summation order
    ch, ch_ref = two_way_chamfer(a, b), brute_chamfer(a, b)
    ch_ok = abs(ch - ch_ref) <= 1e-14 * ch_ref

    m = icosphere(2, 0.3)
    g = build_distance_grid(m, 32)
    probe = rng.uniform(0.05, 0.95, (200, 3))
    exact = np.array([min(point_triangle_dist(p, *m.vertices[t]) for t in m.triangles) for p in probe])
    approx, _ = query_distance(g, probe)
    diag = np.sqrt(3) * g.cell_size
    gap = np.abs(approx - exact).max()
    grid_ok = gap <= diag and np.allclose(point_mesh_distance(m, probe), exact, rtol=1e-12, atol=1e-15)

    x = rng.uniform(0.1, 1.0, (25, 3))
    rk4 = integrate_forward(lambda p, t: p, torch.as_tensor(x), IntegratorConfig(20)).numpy()
    ref = euler_richardson(lambda p, t: p, x, 100_000)
    rel = np.abs(rk4 - ref).max() / np.abs(ref).max()
    ok = nn_ok and ch_ok and grid_ok and rel <= 1e-6
    record(9, ok, f"nearest exact {nn_ok}, chamfer rel. diff {abs(ch - ch_ref) / ch_ref:.0e}, "
                  f"grid gap {gap:.3f} <= diag {diag:.3f}, RK4 vs Euler {rel:.1e}")


@pytest.fixture(scope="module")
def large_run():
    pair = large_pair()
    cfg = PipelineConfig(**dict(BENCH_SETTINGS, backend="flow", bidirectional=True, out_dir="unused"))
    t0 = time.perf_counter()
    run = execute(cfg, pair.source, pair.target, write=False)
    return run, time.perf_counter() - t0


def test_10_performance(large_run):
    run, wall = large_run
    stages = run.report.stage_times
    ok = run.report.n_vertices >= 10_000 and wall <= 60 and "optimize" in stages
    top = ", ".join(f"{k} {v:.1f}s" for k, v in sorted(stages.items(), key=lambda kv: -kv[1])[:4])
    record(10, ok, f"{run.report.n_vertices} vertices in {wall:.1f}s ({top})")
