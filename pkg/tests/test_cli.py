import json

import numpy as np
import pytest

from topotree import cli
from topotree.bsg import check_acyclic, load_bsg
from topotree.pipeline import PipelineConfig
from topotree.voxelgrid import load_grid

ARTIFACTS = ["ground.ply", "grid.bin", "density.bin", "density.ply", "tree.bsg", "tree_mesh.ply",
             "surface_error.csv", "run.jsonl"]


def records(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


def test_pipeline_on_bundled_scene(tmp_path, capsys):
    out = tmp_path / "out"
    assert cli.main(["pipeline", "fixture:five-point", "-o", str(out)]) == 0
    for name in ARTIFACTS:
        assert (out / name).is_file(), name
    assert not list(out.glob("*.partial"))
    assert "surface_error_m" in capsys.readouterr().out
    check_acyclic(load_bsg(out / "tree.bsg").parents)
    # the voxel export keeps exactly the voxels at or above the 0.5 threshold
    _, _, extra = load_grid(out / "density.bin")
    body = (out / "density.ply").read_text().split("end_header\n")[1]
    dens = np.array([float(row.split()[3]) for row in body.splitlines()])
    assert len(dens) == np.count_nonzero(extra["x_bar"] >= 0.5) > 0 and dens.min() >= 0.5
    log = records(out / "run.jsonl")
    assert log[0]["event"] == "start" and log[-1] == {**log[-1], "event": "done", "status": "ok"}
    assert sum(r["event"] == "iteration" for r in log) == 20
    # the echoed config alone reproduces the run's settings
    cfg = next(r["config"] for r in log if r["event"] == "config")
    assert PipelineConfig(**cfg) == PipelineConfig(w=0.1, target_N=None)
    stages = [r["stage"] for r in log if r["event"] == "stage"]
    assert stages == ["ground", "carve", "optimize", "extract", "evaluate"]


def test_stage_by_stage_matches_pipeline(tmp_path, capsys):
    s = tmp_path
    assert cli.main(["pipeline", "fixture:five-point", "-o", str(s / "p")]) == 0
    assert cli.main(["ground", "fixture:five-point", "-o", str(s / "g.ply")]) == 0
    assert cli.main(["carve", "fixture:five-point", "--ground", str(s / "g.ply"), "-o", str(s / "grid.bin")]) == 0
    assert cli.main(["optimize", str(s / "grid.bin"), "-o", str(s / "d.bin"), "--voxels", str(s / "d.ply")]) == 0
    assert cli.main(["extract", str(s / "d.bin"), "-o", str(s / "t.bsg"), "--mesh", str(s / "t.ply")]) == 0
    capsys.readouterr()
    assert cli.main(["evaluate", str(s / "t.bsg"), "fixture:five-point", "-o", str(s / "se.csv")]) == 0
    assert (s / "d.bin").read_bytes() == (s / "p" / "density.bin").read_bytes()
    assert (s / "t.bsg").read_text() == (s / "p" / "tree.bsg").read_text()
    assert (s / "se.csv").read_text() == (s / "p" / "surface_error.csv").read_text()
    assert len(records(s / "run.jsonl")) > 10


def test_optimize_is_bit_identical_across_thread_counts(tmp_path):
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    args = ["optimize", "fixture:slab", "--set", "iterations=4"]
    assert cli.main(args + ["-o", str(a), "--threads", "1"]) == 0
    assert cli.main(args + ["-o", str(b), "--threads", "3"]) == 0
    assert a.read_bytes() == b.read_bytes()
    _, _, extra = load_grid(a)
    assert extra["x_bar"].shape == (40, 1, 30)


def test_config_file_and_overrides(tmp_path):
    conf = tmp_path / "run.conf"
    conf.write_text("# small run\niterations = 3  # quick\nalpha=0.5\n")
    out = tmp_path / "d.bin"
    args = ["optimize", "fixture:slab", "--config", str(conf), "--set", "alpha=0.25", "-o", str(out)]
    assert cli.main(args) == 0
    cfg = next(r["config"] for r in records(tmp_path / "run.jsonl") if r["event"] == "config")
    assert cfg["iterations"] == 3 and cfg["alpha"] == 0.25 and cfg["v_max"] == 240.0


@pytest.mark.parametrize("argv,code,tag", [
    (["carve", "missing.txt"], 3, "[setup]: input error"),
    (["evaluate", "none.bsg", "fixture:five-point"], 3, "input error"),
    (["extract", "fixture:nope"], 3, "unknown density fixture"),
    (["optimize", "fixture:slab", "--set", "alpha=-1"], 2, "config error"),
    (["optimize", "fixture:slab", "--set", "bogus=1"], 2, "unknown config key"),
    (["optimize", "fixture:slab", "--set", "iterations"], 2, "key=value"),
    (["optimize", "fixture:slab", "--config", "nofile.conf"], 2, "config file not found"),
    (["optimize", "fixture:slab", "--set", "cg_max_iter=1"], 4, "[optimize]: numerical failure"),
])
def test_error_exit_codes(tmp_path, capsys, argv, code, tag):
    argv = argv + ["--log", str(tmp_path / "log.jsonl")]
    if argv[0] == "optimize":
        argv += ["-o", str(tmp_path / "d.bin")]
    assert cli.main(argv) == code
    assert tag in capsys.readouterr().err
    assert records(tmp_path / "log.jsonl")[-1]["exit_code"] == code
    assert not (tmp_path / "d.bin").exists()


def test_usage_errors_exit_2():
    with pytest.raises(SystemExit) as info:
        cli.main(["transmogrify"])
    assert info.value.code == 2


def test_failed_stage_leaves_partial_marker(tmp_path, monkeypatch, capsys):
    def boom(*a, **k):
        raise cli.NumericalError("mesh export failed")

    monkeypatch.setattr(cli.bsgmod, "export_mesh", boom)
    out = tmp_path / "t.bsg"
    assert cli.main(["extract", "fixture:y-tree", "-o", str(out), "--mesh", str(tmp_path / "m.ply")]) == 4
    assert not out.exists() and (tmp_path / "t.bsg.partial").exists()
    assert "partial outputs left as" in capsys.readouterr().err


def test_extract_fixtures(tmp_path):
    for name in ("column", "y-tree", "three-point"):
        out = tmp_path / f"{name}.bsg"
        assert cli.main(["extract", f"fixture:{name}", "-o", str(out)]) == 0
        g = load_bsg(out)
        assert len(g.roots) == 1
    assert len(load_bsg(tmp_path / "column.bsg")) == 5


def test_study_harnesses(tmp_path, capsys):
    occ = tmp_path / "occ.csv"
    args = ["occlude", "fixture:five-point", "--center", "0", "0", "0.85", "--fractions", "0", "0.25",
            "-o", str(occ)]
    assert cli.main(args) == 0
    lines = occ.read_text().splitlines()
    assert lines[0] == "fraction,se_m" and len(lines) == 3
    sweep = tmp_path / "sweep.csv"
    assert cli.main(["sweep", "fixture:five-point", "--voxels", "4000", "12000",
                     "-o", str(sweep)]) == 0
    rows = [line.split(",") for line in sweep.read_text().splitlines()[1:]]
    assert len(rows) == 2 and float(rows[0][0]) > float(rows[1][0])
    fit = [r for r in records(tmp_path / "run.jsonl") if r["event"] == "fit"]
    assert len(fit) == 1 and np.isfinite(fit[0]["slope"])
    assert cli.main(["occlude", "fixture:five-point", "-o", str(tmp_path / "x.csv")]) == 3
