"""End-to-end orchestration: preprocessing, deformation, transfer, metrics and animation export."""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .connectivity import SkeletonTemplate, VirtualLinkSet, build_skeleton, build_virtual_links
from .energy import EnergyConfig, load_labels, node_labels
from .explicit import LMParams, optimize_explicit
from .flow import (FlowDirection, FlowTrainConfig, IntegratorConfig, _net64, bijection_error,
                   evaluate_direction, integrate_forward, optimize_flow, sample_trajectory, save_checkpoint)
from .mesh import NormalizationTransform, TriMesh, clean_mesh, fit_normalization, load_mesh, save_mesh
from .metrics import new_self_intersections, two_way_chamfer
from .spatial import DistanceGrid, build_distance_grid
from .subdivision import SubdividedMesh, compute_orientation_field, subdivide
from .transfer import TransferProblem, transfer_deformation

log = logging.getLogger(__name__)

BACKENDS = ("explicit", "flow")
DEFAULT_LAMBDA = {"explicit": 1.0, "flow": 0.1}


class PipelineError(RuntimeError):
    """A stage failure, tagged with the stage name."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineConfig:
    source: str = ""
    target: str = ""
    out_dir: str = "out"
    theta_l: float = 0.02
    theta_d: float = 0.015
    theta_g: float = 0.01
    backend: str = "flow"
    fitting: str = "both"
    lam: float | None = None
    transfer_lam: float = 1.0
    steps: int = 20
    iters: int = 1000
    lr: float = 1e-3
    bidirectional: bool = False
    seed: int = 0
    hidden: tuple = (64, 64, 64)
    lm_iters: int = 200
    grid_resolution: int = 64
    merge_eps: float = 0.0
    smoothing_iters: int = 50
    normalization: str = "independent"
    source_labels: str | None = None
    target_labels: str | None = None
    chamfer_samples: int = 10_000
    count_intersections: bool = True
    original_coords: bool = False
    time_samples: int = 0

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        self.validate()

    def validate(self) -> None:
        for name in ("theta_l", "theta_d", "theta_g"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.backend not in BACKENDS:
            raise ValueError(f"backend must be one of {BACKENDS}")
        if self.normalization not in ("independent", "shared"):
            raise ValueError("normalization must be 'independent' or 'shared'")
        if self.bidirectional and self.backend != "flow":
            raise ValueError("two-way optimization needs the flow backend")

    @property
    def effective_lambda(self) -> float:
        return DEFAULT_LAMBDA[self.backend] if self.lam is None else float(self.lam)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path: str | Path, **overrides) -> "PipelineConfig":
        data = json.loads(Path(path).read_text())
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class MetricsReport:
    chamfer_pre: float
    chamfer_post: float
    chamfer_samples: int
    bijection_max: float | None
    bijection_mean: float | None
    new_self_intersections: int | None
    stage_times: dict
    energy_initial: dict
    energy_final: dict
    solver_iterations: int
    n_vertices: int
    n_subdivided_vertices: int
    n_skeleton_nodes: int
    energy_log: str = "energy.csv"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class Prepared:
    """Preprocessing artifacts of one mesh in normalized coordinates."""

    mesh: TriMesh
    transform: NormalizationTransform
    subdivided: SubdividedMesh
    links: VirtualLinkSet
    skeleton: SkeletonTemplate
    grid: DistanceGrid | None = None


@dataclass
class PipelineRun:
    config: PipelineConfig
    source: Prepared
    target: Prepared
    deformed_nodes: np.ndarray
    angles: np.ndarray
    deformed_mesh: TriMesh
    report: MetricsReport
    net: object | None = None
    solver_report: object | None = None
    train_log: object | None = None
    extras: dict = field(default_factory=dict)


class _Timer:
    def __init__(self):
        self.times: dict[str, float] = {}

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        except PipelineError:
            raise
        except Exception as exc:
            raise PipelineError(name, exc) from exc
        finally:
            self.times[name] = self.times.get(name, 0.0) + time.perf_counter() - t0


def configure_threads() -> None:
    """Apply ``ODEFORM_THREADS`` to torch and numba when set."""
    n = os.environ.get("ODEFORM_THREADS")
    if not n:
        return
    import numba
    import torch
    torch.set_num_threads(int(n))
    numba.set_num_threads(min(int(n), numba.config.NUMBA_NUM_THREADS))


def _load(obj) -> TriMesh:
    return obj if isinstance(obj, TriMesh) else load_mesh(obj)


def prepare(mesh: TriMesh, transform: NormalizationTransform, config: PipelineConfig,
            timer: _Timer, tag: str, with_grid: bool) -> Prepared:
    with timer.stage(f"clean_{tag}"):
        m = clean_mesh(mesh.with_vertices(transform.apply(mesh.vertices)), config.merge_eps)
    with timer.stage(f"subdivide_{tag}"):
        field_ = compute_orientation_field(m, config.smoothing_iters)
        sub = subdivide(m, field_, config.theta_l)
    with timer.stage(f"links_{tag}"):
        links = build_virtual_links(sub, config.theta_d)
    with timer.stage(f"skeleton_{tag}"):
        skel = build_skeleton(sub, links, config.theta_g)
    grid = None
    if with_grid:
        with timer.stage(f"grid_{tag}"):
            grid = build_distance_grid(m, config.grid_resolution)
    return Prepared(m, transform, sub, links, skel, grid)


def _labels(path, prepared: Prepared) -> np.ndarray | None:
    """Node labels from a per-vertex sidecar aligned with the cleaned mesh."""
    if path is None:
        return None
    vl = load_labels(path)
    n_sub = prepared.subdivided.mesh.n_vertices
    if len(vl) != prepared.mesh.n_vertices:
        raise ValueError(f"{path}: {len(vl)} labels for {prepared.mesh.n_vertices} vertices")
    # subdivision vertices inherit the label of the source triangle's first corner
    sub = prepared.subdivided
    full = np.empty(n_sub, dtype=np.int64)
    full[:len(vl)] = vl
    extra = np.arange(len(vl), n_sub)
    tri_of = np.full(n_sub, -1, dtype=np.int64)
    tri_of[sub.triangles[::-1].ravel()] = np.repeat(sub.triangle_source[::-1], 3)
    full[extra] = vl[sub.source.triangles[tri_of[extra], 0]]
    return node_labels(full, prepared.skeleton.assignment)


def execute(config: PipelineConfig, source: TriMesh | None = None, target: TriMesh | None = None,
            write: bool = True) -> PipelineRun:
    """Run every stage; meshes may be passed directly instead of through the config paths."""
    configure_threads()
    timer = _Timer()
    with timer.stage("load"):
        src_raw = _load(source if source is not None else config.source)
        tgt_raw = _load(target if target is not None else config.target)
    with timer.stage("normalize"):
        if config.normalization == "shared":
            tf_s = tf_t = fit_normalization(np.concatenate([src_raw.vertices, tgt_raw.vertices]))
        else:
            tf_s = fit_normalization(src_raw.vertices)
            tf_t = fit_normalization(tgt_raw.vertices)
    two_way = config.bidirectional
    A = prepare(src_raw, tf_s, config, timer, "source", with_grid=two_way)
    B = prepare(tgt_raw, tf_t, config, timer, "target", with_grid=True)

    lam = config.effective_lambda
    with timer.stage("labels"):
        la = _labels(config.source_labels, A)
        lb = _labels(config.target_labels, B)
    cfg_ab = EnergyConfig(lam, config.fitting, la, lb)
    integ = IntegratorConfig(config.steps)
    net = net64 = train_log = None
    with timer.stage("optimize"):
        if config.backend == "explicit":
            deformation, solver = optimize_explicit(
                A.skeleton, B.grid, B.skeleton.nodes, cfg_ab, LMParams(max_iters=config.lm_iters))
            nodes, angles = deformation.nodes, deformation.angles
        else:
            fwd = FlowDirection.from_skeleton(A.skeleton, cfg_ab, B.grid, B.skeleton.nodes)
            bwd = None
            if two_way:
                cfg_ba = EnergyConfig(lam, config.fitting, lb, la)
                bwd = FlowDirection.from_skeleton(B.skeleton, cfg_ba, A.grid, A.skeleton.nodes, inverse=True)
            train = FlowTrainConfig(config.lr, config.iters, lam, two_way, config.seed, config.hidden)
            deformation, solver, train_log = optimize_flow(fwd, bwd, train, integ)
            net = deformation.net
            net64 = _net64(net)
            nodes = integrate_forward(net64, A.skeleton.nodes, integ)
            angles = deformation.angles
    with timer.stage("transfer"):
        problem = TransferProblem.from_skeleton(A.subdivided.vertices, A.links, A.skeleton, nodes, angles,
                                                config.transfer_lam)
        deformed = A.subdivided.mesh.with_vertices(transfer_deformation(problem))
    with timer.stage("metrics"):
        pre = two_way_chamfer(A.subdivided.mesh, B.mesh, config.chamfer_samples, config.seed)
        post = two_way_chamfer(deformed, B.mesh, config.chamfer_samples, config.seed)
        bij = bijection_error(net64, A.skeleton.nodes, integ) if net64 is not None else (None, None)
        inter = new_self_intersections(A.subdivided.mesh, deformed) if config.count_intersections else None
    extras = {}
    if net64 is not None and two_way:
        extras["energy_ab"] = evaluate_direction(net, deformation.angles, fwd, integ).total
        extras["energy_ba"] = evaluate_direction(net, deformation.angles_inverse, bwd, integ).total
    elif net64 is not None:
        extras["energy_ab"] = evaluate_direction(net, deformation.angles, fwd, integ).total
    else:
        extras["energy_ab"] = solver.final.total
    report = MetricsReport(
        chamfer_pre=pre, chamfer_post=post, chamfer_samples=config.chamfer_samples,
        bijection_max=bij[0], bijection_mean=bij[1], new_self_intersections=inter,
        stage_times=dict(timer.times), energy_initial=vars(solver.initial), energy_final=vars(solver.final),
        solver_iterations=solver.iterations, n_vertices=A.mesh.n_vertices,
        n_subdivided_vertices=A.subdivided.mesh.n_vertices, n_skeleton_nodes=A.skeleton.n_nodes,
    )
    run = PipelineRun(config, A, B, nodes, angles, deformed, report, net, solver, train_log, extras)
    if write:
        write_outputs(run)
        if config.time_samples and net is not None:
            export_animation(run, config.time_samples, Path(config.out_dir) / "frames")
    return run


def run_pipeline(config: PipelineConfig) -> MetricsReport:
    return execute(config).report


def write_outputs(run: PipelineRun) -> None:
    out = Path(run.config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mesh = run.deformed_mesh
    if run.config.original_coords:
        mesh = mesh.with_vertices(run.target.transform.invert(mesh.vertices))
    save_mesh(out / "deformed.obj", mesh)
    run.source.skeleton.save(out / "skeleton.json")
    (out / "deformed_nodes.json").write_text(json.dumps({
        "nodes": run.deformed_nodes.tolist(), "angles": np.asarray(run.angles).tolist()}))
    (out / "normalization.json").write_text(run.target.transform.to_json())
    (out / "config.json").write_text(json.dumps(run.config.to_dict(), indent=2))
    run.solver_report.log.write(out / "energy.csv")
    if run.net is not None:
        save_checkpoint(out / "velocity.ckpt", run.net)
        run.train_log.write(out / "train_log.csv")
    report = run.report.to_dict()
    report["solver"] = run.solver_report.to_dict()
    (out / "report.json").write_text(json.dumps(report, indent=2))


def export_animation(run: PipelineRun, n_frames: int, out_dir: str | Path) -> list[Path]:
    """Frames ``k / (n_frames - 1)`` of the flow, each transferred to the dense mesh.

    Skeleton positions come from the sampled trajectory and the rotations are
    scaled linearly in time.
    """
    if run.net is None:
        raise ValueError("animation needs the flow backend (the explicit map has no time parameter)")
    if n_frames < 2:
        raise ValueError("need at least two frames")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ts = np.arange(n_frames) / (n_frames - 1)
    integ = IntegratorConfig(run.config.steps)
    states = sample_trajectory(_net64(run.net), run.source.skeleton.nodes, ts, integ)
    sub = run.source.subdivided
    paths = []
    for k, (t, nodes) in enumerate(zip(ts, states)):
        problem = TransferProblem.from_skeleton(sub.vertices, run.source.links, run.source.skeleton,
                                                nodes, t * np.asarray(run.angles), run.config.transfer_lam)
        verts = transfer_deformation(problem)
        p = out / f"frame_{k:04d}.obj"
        save_mesh(p, sub.mesh.with_vertices(verts))
        paths.append(p)
    return paths
