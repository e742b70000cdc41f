"""Command line entry point: ``odeform {preprocess,deform,animate,eval,bench}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .mesh import MeshError, clean_mesh, load_mesh, normalize, save_mesh
from .pipeline import PipelineConfig, PipelineError, execute, export_animation

# flags shared by deform/animate that map 1:1 onto PipelineConfig fields
_CONFIG_FLAGS = {
    "theta_l": float, "theta_d": float, "theta_g": float, "lam": float, "transfer_lam": float,
    "steps": int, "iters": int, "lr": float, "seed": int, "lm_iters": int, "grid_resolution": int,
    "merge_eps": float, "chamfer_samples": int, "time_samples": int,
}


def _add_pipeline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--source")
    p.add_argument("--target")
    p.add_argument("--config", help="JSON file with PipelineConfig fields; flags override it")
    p.add_argument("--out-dir")
    p.add_argument("--backend", choices=["explicit", "flow"])
    p.add_argument("--fitting", choices=["forward", "backward", "both"])
    p.add_argument("--bidirectional", action="store_true", default=None)
    p.add_argument("--normalization", choices=["independent", "shared"])
    p.add_argument("--source-labels")
    p.add_argument("--target-labels")
    p.add_argument("--original-coords", action="store_true", default=None)
    p.add_argument("--no-intersections", dest="count_intersections", action="store_false", default=None)
    for name, typ in _CONFIG_FLAGS.items():
        p.add_argument("--" + name.replace("_", "-"), type=typ, dest=name)


def config_from_args(args: argparse.Namespace) -> PipelineConfig:
    keys = ["source", "target", "out_dir", "backend", "fitting", "bidirectional", "normalization",
            "source_labels", "target_labels", "original_coords", "count_intersections", *_CONFIG_FLAGS]
    overrides = {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}
    if args.config:
        return PipelineConfig.from_json(args.config, **overrides)
    return PipelineConfig.from_dict(overrides)


def cmd_preprocess(args) -> int:
    from .connectivity import build_skeleton, build_virtual_links, save_links
    from .spatial import build_distance_grid
    from .subdivision import compute_orientation_field, subdivide

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mesh, tf = normalize(load_mesh(args.mesh))
    mesh = clean_mesh(mesh, args.merge_eps)
    sub = subdivide(mesh, compute_orientation_field(mesh), args.theta_l)
    links = build_virtual_links(sub, args.theta_d)
    skel = build_skeleton(sub, links, args.theta_g)
    save_mesh(out / "subdivided.obj", sub.mesh)
    save_links(out / "links.txt", links)
    skel.save(out / "skeleton.json")
    build_distance_grid(mesh, args.grid_resolution).save(out / "grid.modf")
    (out / "normalization.json").write_text(tf.to_json())
    print(json.dumps({"vertices": mesh.n_vertices, "subdivided_vertices": sub.mesh.n_vertices,
                      "links": len(links), "skeleton_nodes": skel.n_nodes}))
    return 0


def cmd_deform(args) -> int:
    cfg = config_from_args(args)
    if not cfg.source or not cfg.target:
        raise SystemExit("deform needs --source and --target (or a config file providing them)")
    run = execute(cfg)
    print(json.dumps(run.report.to_dict(), indent=2))
    return 0


def cmd_animate(args) -> int:
    cfg = config_from_args(args)
    cfg.backend = "flow"
    frames = cfg.time_samples or 11
    cfg.time_samples = 0
    run = execute(cfg)
    paths = export_animation(run, frames, Path(cfg.out_dir) / "frames")
    print(f"wrote {len(paths)} frames to {Path(cfg.out_dir) / 'frames'}")
    return 0


def cmd_eval(args) -> int:
    from .metrics import count_self_intersections, two_way_chamfer

    a, b = load_mesh(args.a), load_mesh(args.b)
    out = {"chamfer": two_way_chamfer(a, b, args.samples, args.seed), "samples": args.samples}
    if args.intersections:
        out["self_intersections_a"] = count_self_intersections(a)
        out["self_intersections_b"] = count_self_intersections(b)
    print(json.dumps(out, indent=2))
    return 0


def cmd_bench(args) -> int:
    from .suite import BENCH_SETTINGS, large_pair, suite_pairs

    pairs = suite_pairs() + ([large_pair()] if args.large else [])
    if args.pairs:
        pairs = [p for p in pairs if p.name in args.pairs]
    rows = []
    for pair in pairs:
        settings = dict(BENCH_SETTINGS)
        settings.update(backend=args.backend, bidirectional=args.backend == "flow" and not args.one_way,
                        out_dir=str(Path(args.out_dir) / pair.name), seed=args.seed,
                        count_intersections=pair.name == "plate_bend")
        t0 = time.perf_counter()
        run = execute(PipelineConfig(**settings), pair.source, pair.target)
        r = run.report
        rows.append({"pair": pair.name, "chamfer_pre": r.chamfer_pre, "chamfer_post": r.chamfer_post,
                     "ratio": r.chamfer_post / r.chamfer_pre, "bijection_max": r.bijection_max,
                     "new_intersections": r.new_self_intersections,
                     "seconds": time.perf_counter() - t0})
        print(f"{pair.name:20s} pre={r.chamfer_pre:.3e} post={r.chamfer_post:.3e} "
              f"ratio={rows[-1]['ratio']:.3f} time={rows[-1]['seconds']:.1f}s", flush=True)
    Path(args.out_dir).mkdir(parents=True, exist_ok=True)
    (Path(args.out_dir) / "bench.json").write_text(json.dumps(rows, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="odeform", description="Correspondence-free mesh deformation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="normalize, clean, subdivide and build the skeleton of one mesh")
    p.add_argument("mesh")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--theta-l", type=float, default=0.02)
    p.add_argument("--theta-d", type=float, default=0.015)
    p.add_argument("--theta-g", type=float, default=0.01)
    p.add_argument("--merge-eps", type=float, default=0.0)
    p.add_argument("--grid-resolution", type=int, default=64)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("deform", help="deform --source to fit --target")
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_deform)

    p = sub.add_parser("animate", help="flow deformation plus intermediate frames")
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_animate)

    p = sub.add_parser("eval", help="two-way chamfer (and optional self-intersections) of two meshes")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--samples", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--intersections", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="run the synthetic benchmark suite")
    p.add_argument("--backend", choices=["explicit", "flow"], default="flow")
    p.add_argument("--one-way", action="store_true", help="flow: optimize one direction only")
    p.add_argument("--pairs", nargs="*")
    p.add_argument("--large", action="store_true", help="include the 10k-vertex pair")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default="bench_out")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (PipelineError, MeshError, ValueError) as exc:
        print(f"odeform: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
