import numpy as np
import pytest

from topotree.bsg import check_acyclic
from topotree.errors import ConfigError
from topotree.ground import build_ground
from topotree.pipeline import PipelineConfig, resolve_v_max, run_pipeline, tree_points
from topotree.synthetic import five_point_scene


def test_defaults_reproduce_published_settings():
    cfg = PipelineConfig()
    assert (cfg.alpha, cfg.target_N, cfg.iterations, cfg.v_max_ratio) == (1.0, 5_000_000, 20, 0.2)
    assert (cfg.exclusion_height, cfg.g, cfg.w, cfg.v_max) == (0.3, 1.0, None, None)
    opt = cfg.optimizer_config(10.0)
    assert opt.p_schedule[0] == 1.0 and opt.p_schedule[-1] == 3.0
    assert opt.beta_schedule[0] == 1.0 and opt.beta_schedule[-1] == 4.0
    assert len(opt.p_schedule) == 20 and np.all(np.diff(opt.p_schedule) >= 0)


def test_overrides_and_file(tmp_path):
    cfg = PipelineConfig().with_overrides({"iterations": "7", "w": "0.2", "cg_max_iter": "none", "alpha": "0.5"})
    assert cfg.iterations == 7 and isinstance(cfg.iterations, int)
    assert cfg.w == 0.2 and cfg.target_N is None and cfg.alpha == 0.5
    path = tmp_path / "c.conf"
    path.write_text(cfg.dumps())
    assert PipelineConfig.from_file(path) == cfg
    assert PipelineConfig.from_file(path, {"alpha": "0"}).alpha == 0.0
    for bad in ({"iterations": "2.5"}, {"alpha": "x"}, {"nope": "1"}, {"iterations": "0"}, {"g": "0"}):
        with pytest.raises(ConfigError):
            PipelineConfig().with_overrides(bad)
    path.write_text("alpha 1\n")
    with pytest.raises(ConfigError):
        PipelineConfig.from_file(path)
    with pytest.raises(ConfigError):
        PipelineConfig(target_N=None)


def test_run_pipeline_on_five_points():
    cloud = five_point_scene()
    cfg = PipelineConfig(w=0.1, target_N=None)
    seen = []
    res = run_pipeline(cloud, cfg, callback=lambda rec, f: seen.append(rec["iteration"]))
    assert seen == list(range(20))
    assert res.v_max == pytest.approx(0.2 * res.grid.v_filled)
    assert resolve_v_max(res.grid, cfg.replace(v_max=3.0)) == 3.0
    check_acyclic(res.bsg.parents)
    assert len(res.bsg.roots) >= 1 and len(res.bsg) > 5
    # the graph reaches from the ground up to the height of the elevated points
    assert res.bsg.positions[:, 2].min() < 0.3 and res.bsg.positions[:, 2].max() > 1.3
    for rec in res.optimization.log:
        assert rec["volume"] <= res.v_max + 1e-9 * res.grid.N


def test_tree_points_exclusion():
    cloud = five_point_scene()
    pts = tree_points(cloud, build_ground(cloud), 0.3)
    assert len(pts) == 5 and np.all(pts[:, 2] >= 1.5)
    assert len(tree_points(cloud, build_ground(cloud), 1.65)) == 1
