import json

import numpy as np
import pytest
from suiteruns import ratio, suite_run

from odeform.cli import main
from odeform.mesh import load_mesh
from odeform.pipeline import PipelineConfig, PipelineError, execute, export_animation
from odeform.suite import get_pair, grid_plate, write_pair

FAST = {"theta_g": 0.08, "iters": 20, "normalization": "shared", "chamfer_samples": 2000}


@pytest.fixture(scope="module")
def plate_files(tmp_path_factory):
    return write_pair(get_pair("plate_translate"), tmp_path_factory.mktemp("pair"))


def _run(tmp_path, src, tgt, **kw):
    cfg = PipelineConfig(**dict(FAST, source=str(src), target=str(tgt), out_dir=str(tmp_path), **kw))
    return execute(cfg)


# ---------------------------------------------------------------- config

@pytest.mark.parametrize("kw", [{"theta_l": 0.0}, {"theta_g": -1.0}, {"backend": "mlp"},
                                {"normalization": "none"}, {"backend": "explicit", "bidirectional": True}])
def test_config_rejects_invalid(kw):
    with pytest.raises(ValueError):
        PipelineConfig(**kw)


def test_config_json_and_overrides(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"theta_g": 0.05, "iters": 10, "backend": "explicit"}))
    cfg = PipelineConfig.from_json(p, iters=3, lr=None)
    assert cfg.theta_g == 0.05 and cfg.iters == 3 and cfg.backend == "explicit"
    assert cfg.effective_lambda == 1.0
    assert PipelineConfig().effective_lambda == 0.1
    assert PipelineConfig.from_dict(cfg.to_dict()) == cfg
    p.write_text(json.dumps({"nonsense": 1}))
    with pytest.raises(ValueError):
        PipelineConfig.from_json(p)


# ---------------------------------------------------------------- pipeline

def test_outputs_written(tmp_path, plate_files):
    run = _run(tmp_path, *plate_files, backend="flow")
    for name in ("deformed.obj", "skeleton.json", "report.json", "energy.csv", "velocity.ckpt",
                 "train_log.csv", "config.json", "deformed_nodes.json", "normalization.json"):
        assert (tmp_path / name).exists(), name
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["chamfer_samples"] == 2000 and report["chamfer_pre"] >= 0
    assert all(t >= 0 for t in report["stage_times"].values())
    assert {"subdivide_source", "skeleton_target", "grid_target", "optimize", "transfer"} <= set(report["stage_times"])
    assert load_mesh(tmp_path / "deformed.obj").n_vertices == run.source.subdivided.mesh.n_vertices
    lines = (tmp_path / "energy.csv").read_text().splitlines()
    assert lines[0] == "iter,E_Da,E_Db,E_R,total" and len(lines) == 22


def test_deterministic_outputs(tmp_path, plate_files):
    for backend in ("flow", "explicit"):
        a = _run(tmp_path / f"{backend}1", *plate_files, backend=backend)
        b = _run(tmp_path / f"{backend}2", *plate_files, backend=backend)
        first, second = (tmp_path / f"{backend}{k}" / "deformed.obj" for k in (1, 2))
        assert first.read_bytes() == second.read_bytes()
        assert a.report.chamfer_post == b.report.chamfer_post


def test_identity_task(tmp_path, plate_files):
    src = plate_files[0]
    run = _run(tmp_path, src, src, backend="flow", iters=0)
    assert run.report.chamfer_post <= run.report.chamfer_pre + 1e-15
    assert run.report.bijection_max <= 1e-9
    ex = _run(tmp_path / "e", src, src, backend="explicit")
    assert ex.report.chamfer_post <= ex.report.chamfer_pre + 1e-12
    assert ex.report.bijection_max is None


@pytest.mark.slow
@pytest.mark.parametrize("backend", ["explicit", "flow"])
def test_translated_plate_both_backends(backend):
    assert ratio(suite_run("plate_translate", backend)) <= 0.01


@pytest.mark.slow
def test_sphere_to_ellipsoid_flow():
    run = suite_run("sphere_ellipsoid", "flow")
    assert ratio(run) <= 0.25
    # independent evaluator: brute-force chamfer over fresh samples
    from oracles import brute_chamfer
    from odeform.metrics import sample_surface
    a = sample_surface(run.deformed_mesh, 1500, seed=9)
    b = sample_surface(run.target.mesh, 1500, seed=10)
    c = sample_surface(run.source.mesh, 1500, seed=9)
    assert brute_chamfer(a, b) <= 0.25 * brute_chamfer(c, b)


def test_stage_error_is_tagged(tmp_path):
    with pytest.raises(PipelineError) as err:
        _run(tmp_path, tmp_path / "missing.obj", tmp_path / "missing.obj")
    assert err.value.stage == "load"


def test_original_coords(tmp_path):
    big = grid_plate(0.0, 4.0, 0.0, 4.0, 1.0, 3, 3)
    src = tmp_path / "a.obj"
    from odeform.mesh import save_mesh
    save_mesh(src, big)
    _run(tmp_path / "o", src, src, backend="flow", iters=0, original_coords=True)
    out = load_mesh(tmp_path / "o" / "deformed.obj")
    assert out.vertices[:, 0].max() == pytest.approx(4.0, abs=1e-9)


def test_part_labels(tmp_path, plate_files):
    src, tgt = plate_files
    for p in (src, tgt):
        n = load_mesh(p).n_vertices
        (tmp_path / (p.stem + ".txt")).write_text("\n".join(str(i % 2) for i in range(n)))
    run = _run(tmp_path, src, tgt, backend="explicit", source_labels=str(tmp_path / (src.stem + ".txt")),
               target_labels=str(tmp_path / (tgt.stem + ".txt")))
    assert run.report.chamfer_post <= run.report.chamfer_pre
    (tmp_path / "bad.txt").write_text("0\n1\n")
    with pytest.raises(PipelineError):
        _run(tmp_path, src, tgt, backend="explicit", source_labels=str(tmp_path / "bad.txt"))


# ---------------------------------------------------------------- animation

def test_animation_endpoints(tmp_path, plate_files):
    run = _run(tmp_path, *plate_files, backend="flow")
    paths = export_animation(run, 2, tmp_path / "frames")
    first, last = load_mesh(paths[0]), load_mesh(paths[1])
    np.testing.assert_allclose(first.vertices, run.source.subdivided.vertices, atol=1e-9)
    np.testing.assert_allclose(last.vertices, run.deformed_mesh.vertices, atol=1e-9)


def test_animation_identity_field(tmp_path, plate_files):
    run = _run(tmp_path, *plate_files, backend="flow", iters=0)
    for p in export_animation(run, 4, tmp_path / "frames"):
        np.testing.assert_allclose(load_mesh(p).vertices, run.source.subdivided.vertices, atol=1e-9)


@pytest.mark.slow
def test_animation_smooth_on_sphere(tmp_path):
    run = suite_run("sphere_ellipsoid", "flow")
    frames = [load_mesh(p).vertices for p in export_animation(run, 11, tmp_path)]
    step = max(np.linalg.norm(b - a, axis=1).max() for a, b in zip(frames[:-1], frames[1:]))
    total = np.linalg.norm(frames[-1] - frames[0], axis=1).max()
    assert step <= 3 * total / 10


def test_animation_errors(tmp_path, plate_files):
    run = _run(tmp_path, *plate_files, backend="explicit")
    with pytest.raises(ValueError):
        export_animation(run, 5, tmp_path)
    flow = _run(tmp_path / "f", *plate_files, backend="flow", iters=0)
    with pytest.raises(ValueError):
        export_animation(flow, 1, tmp_path)


# ---------------------------------------------------------------- CLI

def test_cli_eval(capsys, plate_files):
    assert main(["eval", str(plate_files[0]), str(plate_files[0]), "--samples", "500", "--intersections"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["chamfer"] == 0.0 and out["self_intersections_a"] == 0


def test_cli_preprocess(tmp_path, capsys, plate_files):
    assert main(["preprocess", str(plate_files[0]), "--out-dir", str(tmp_path), "--theta-g", "0.05"]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["skeleton_nodes"] > 0
    for name in ("subdivided.obj", "links.txt", "skeleton.json", "grid.modf", "normalization.json"):
        assert (tmp_path / name).exists()


def test_cli_deform_with_config_override(tmp_path, capsys, plate_files):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(dict(FAST, source=str(plate_files[0]), target=str(plate_files[1]),
                                   out_dir=str(tmp_path / "out"), iters=50)))
    assert main(["deform", "--config", str(cfg), "--iters", "5", "--backend", "flow", "--bidirectional"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["solver_iterations"] == 5
    saved = json.loads((tmp_path / "out" / "config.json").read_text())
    assert saved["iters"] == 5 and saved["bidirectional"] is True and saved["theta_g"] == 0.08


def test_cli_animate(tmp_path, capsys, plate_files):
    args = ["animate", "--source", str(plate_files[0]), "--target", str(plate_files[1]), "--out-dir", str(tmp_path),
            "--iters", "5", "--theta-g", "0.08", "--time-samples", "3", "--chamfer-samples", "500"]
    assert main(args) == 0
    assert sorted(p.name for p in (tmp_path / "frames").iterdir()) == [f"frame_{k:04d}.obj" for k in range(3)]


def test_cli_bench(tmp_path, capsys):
    assert main(["bench", "--backend", "explicit", "--pairs", "plate_translate", "--out-dir", str(tmp_path)]) == 0
    rows = json.loads((tmp_path / "bench.json").read_text())
    assert [r["pair"] for r in rows] == ["plate_translate"] and rows[0]["ratio"] <= 0.4


def test_cli_errors(tmp_path, capsys):
    assert main(["deform", "--source", str(tmp_path / "nope.obj"), "--target", str(tmp_path / "nope.obj"),
                 "--out-dir", str(tmp_path)]) == 1
    assert "error" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["deform", "--out-dir", str(tmp_path)])
    with pytest.raises(SystemExit):
        main(["bogus"])
