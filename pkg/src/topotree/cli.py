"""Command-line front end: one subcommand per pipeline stage plus the study harnesses.

Every stage writes its artifacts under a ``.partial`` suffix and renames them
only once the whole stage has succeeded, so a failed run leaves clearly marked
partial files behind. Each invocation appends JSON records to a run log that
starts with the fully resolved configuration.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from . import bsg as bsgmod
from .errors import ConfigError, InputError, NumericalError, TopoTreeError
from .ground import build_ground, load_ground_ply, save_ground_ply
from .metrics import occlusion_study, surface_error, voxel_sweep
from .pipeline import PipelineConfig, resolve_v_max, tree_points
from .ply import atomic_path, write_ply_points
from .raycloud import load_raycloud
from .synthetic import five_point_scene, slab_fixture, solid_column, three_point_tree, two_tree_scene, y_tree_density
from .topopt import optimize
from .voxelgrid import NodalConditions, assign_conditions, build_grid, carve_free_space, load_grid, save_grid

log = logging.getLogger("topotree")

EXIT_OK, EXIT_CONFIG, EXIT_INPUT, EXIT_NUMERICAL = 0, 2, 3, 4
FIXTURE_PREFIX = "fixture:"


# -- bundled fixtures --------------------------------------------------------------

def _two_tree():
    scene = two_tree_scene(step=0.75, thickness=2.0)
    return scene.cloud, scene.centers


CLOUD_FIXTURES = {
    # name: (loader returning (cloud, tree centers or None), config overrides)
    "five-point": (lambda: (five_point_scene(), None), {"w": "0.1"}),
    "two-tree": (_two_tree, {"w": "0.14"}),
}


def _density_fixture(builder):
    grid, x_bar, dirichlet = builder()
    return grid, NodalConditions(np.zeros(grid.node_dims), dirichlet), x_bar


DENSITY_FIXTURES = {
    "column": lambda: _density_fixture(solid_column),
    "y-tree": lambda: _density_fixture(y_tree_density),
    "three-point": lambda: _density_fixture(three_point_tree),
}


def _slab():
    grid, cond, _, _ = slab_fixture()
    return grid, cond


GRID_FIXTURES = {"slab": (_slab, {"v_max": "240"})}


def _fixture_name(spec: str, table: dict, kind: str) -> str | None:
    if not spec.startswith(FIXTURE_PREFIX):
        return None
    name = spec[len(FIXTURE_PREFIX):]
    if name not in table:
        raise InputError(f"unknown {kind} fixture {name!r}; choose from {', '.join(sorted(table))}")
    return name


# -- run context ---------------------------------------------------------------------

class Stage:
    """Tracks the current stage name, staged outputs and the JSON-lines run log."""

    def __init__(self, log_path: Path | None):
        self.name = "setup"
        self.log_path = log_path
        self.pending: list[tuple[str, str]] = []
        self.t0 = time.perf_counter()

    def enter(self, name: str) -> None:
        self.name = name
        self.record(event="stage", stage=name)

    def output(self, path) -> str:
        """Path to write ``path``'s content to until the stage commits."""
        path = os.fspath(path)
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        tmp = atomic_path(path)
        self.pending.append((tmp, path))
        return tmp

    def commit(self) -> None:
        for tmp, final in self.pending:
            os.replace(tmp, final)
            self.record(event="artifact", stage=self.name, path=final)
        self.pending.clear()

    def record(self, **fields) -> None:
        if self.log_path is None:
            return
        fields.setdefault("elapsed_s", round(time.perf_counter() - self.t0, 3))
        with open(self.log_path, "a") as fh:
            fh.write(json.dumps(fields, default=_jsonable, sort_keys=False) + "\n")


def _jsonable(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, np.ndarray):
        return v.tolist()
    return str(v)


# -- stage helpers -----------------------------------------------------------------

def _resolve_config(args, fixture_overrides: dict | None = None) -> PipelineConfig:
    items = dict(fixture_overrides or {})
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = (s.strip() for s in item.split("=", 1))
        items[k] = v
    if "w" in items and "target_N" not in items:
        items["target_N"] = "none"
    if args.config:
        if not Path(args.config).is_file():
            raise ConfigError(f"config file not found: {args.config}")
        return PipelineConfig.from_file(args.config, items)
    return PipelineConfig().with_overrides(items)


def _load_cloud(args):
    """Returns ``(cloud, centers or None, fixture overrides)``."""
    name = _fixture_name(args.cloud, CLOUD_FIXTURES, "ray cloud")
    if name is not None:
        loader, overrides = CLOUD_FIXTURES[name]
        cloud, centers = loader()
        return cloud, centers, overrides
    if not Path(args.cloud).is_file():
        raise InputError(f"ray cloud not found: {args.cloud}")
    return load_raycloud(args.cloud, args.format, args.origin), None, {}


def _write_density_ply(path, grid, x_bar, threshold) -> None:
    keep = x_bar.ravel() >= threshold
    write_ply_points(path, grid.voxel_centers()[keep], x_bar.ravel()[keep], "density")


def _write_cylinder_csv(path, report) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["cylinder", "mean_distance_m", "area_m2", "points"])
        for s in report.per_cylinder:
            wr.writerow([s.index, repr(s.mean_distance), repr(s.area), s.count])


def _run_ground(stage, cloud, cfg, out):
    stage.enter("ground")
    ground = build_ground(cloud, cfg.g)
    save_ground_ply(ground, stage.output(out))
    stage.record(event="ground", vertices=len(ground.vertices), triangles=len(ground.triangles),
                 status=ground.status)
    stage.commit()
    return ground


def _run_carve(stage, cloud, ground, cfg, out):
    stage.enter("carve")
    grid = build_grid(cloud, w=cfg.w) if cfg.w is not None else build_grid(cloud, target_N=cfg.target_N)
    grid = carve_free_space(grid, cloud)
    cond = assign_conditions(grid, cloud, ground, cfg.exclusion_height)
    save_grid(stage.output(out), grid, cond)
    stage.record(event="grid", dims=list(grid.dims), w=grid.w, v_filled=grid.v_filled,
                 loaded_nodes=int(np.count_nonzero(cond.loads)), dirichlet_nodes=int(cond.dirichlet.sum()))
    stage.commit()
    return grid, cond


def _run_optimize(stage, grid, cond, cfg, out, voxel_ply):
    stage.enter("optimize")
    v_max = resolve_v_max(grid, cfg)
    stage.record(event="budget", v_max=v_max)

    def on_iteration(rec, _field):
        stage.record(event="iteration", **rec)

    res = optimize(grid, cond, cfg.optimizer_config(v_max), callback=on_iteration)
    save_grid(stage.output(out), grid, cond, {"x": res.field.x, "x_bar": res.x_bar})
    if voxel_ply:
        _write_density_ply(stage.output(voxel_ply), grid, res.x_bar, cfg.voxel_threshold)
    stage.record(event="optimized", final_compliance=res.log[-1]["compliance"], volume=float(res.field.x.sum()))
    stage.commit()
    return res.x_bar


def _run_extract(stage, grid, cond, x_bar, cfg, out, mesh):
    stage.enter("extract")
    forest = bsgmod.shortest_path_forest(grid, x_bar, cond.dirichlet if cond is not None else None,
                                         cfg.density_floor)
    graph = bsgmod.extract_bsg(grid, x_bar, forest, cfg.threshold_fraction, cfg.crop_fraction)
    bsgmod.save_bsg(graph, stage.output(out))
    if mesh:
        bsgmod.export_mesh(graph, stage.output(mesh), cfg.mesh_sides)
    stage.record(event="bsg", nodes=len(graph), trees=len(graph.roots))
    stage.commit()
    return graph


def _run_evaluate(stage, graph, cloud, cfg, out):
    stage.enter("evaluate")
    ground = build_ground(cloud, cfg.g)
    ref = tree_points(cloud, ground, cfg.exclusion_height)
    report = surface_error(graph, ref)
    _write_cylinder_csv(stage.output(out), report)
    stage.record(event="surface_error", se_m=report.se, cylinders=len(report.per_cylinder), points=len(ref),
                 unmatched=report.unmatched_points)
    stage.commit()
    print(f"surface_error_m {report.se!r}")
    return report


# -- subcommands -----------------------------------------------------------------

def cmd_ground(args, stage):
    cloud, _, fx = _load_cloud(args)
    cfg = _resolve_config(args, fx)
    stage.record(event="config", config=cfg.to_dict())
    _run_ground(stage, cloud, cfg, args.output)


def cmd_carve(args, stage):
    cloud, _, fx = _load_cloud(args)
    cfg = _resolve_config(args, fx)
    stage.record(event="config", config=cfg.to_dict())
    if args.ground:
        if not Path(args.ground).is_file():
            raise InputError(f"ground mesh not found: {args.ground}")
        ground = load_ground_ply(args.ground, cfg.g)
    else:
        ground = build_ground(cloud, cfg.g)
    _run_carve(stage, cloud, ground, cfg, args.output)


def _load_grid_input(spec):
    name = _fixture_name(spec, GRID_FIXTURES, "grid")
    if name is not None:
        build, overrides = GRID_FIXTURES[name]
        grid, cond = build()
        return grid, cond, overrides
    if not Path(spec).is_file():
        raise InputError(f"grid file not found: {spec}")
    grid, cond, _ = load_grid(spec)
    if cond is None:
        raise InputError(f"{spec}: grid file carries no boundary conditions")
    return grid, cond, {}


def cmd_optimize(args, stage):
    grid, cond, fx = _load_grid_input(args.grid)
    cfg = _resolve_config(args, fx)
    stage.record(event="config", config=cfg.to_dict())
    _run_optimize(stage, grid, cond, cfg, args.output, args.voxels)


def cmd_extract(args, stage):
    name = _fixture_name(args.density, DENSITY_FIXTURES, "density")
    if name is not None:
        grid, cond, x_bar = DENSITY_FIXTURES[name]()
    else:
        if not Path(args.density).is_file():
            raise InputError(f"density file not found: {args.density}")
        grid, cond, extra = load_grid(args.density)
        if "x_bar" not in extra:
            raise InputError(f"{args.density}: no x_bar array; run optimize first")
        x_bar = extra["x_bar"]
    cfg = _resolve_config(args)
    stage.record(event="config", config=cfg.to_dict())
    _run_extract(stage, grid, cond, x_bar, cfg, args.output, args.mesh)


def cmd_evaluate(args, stage):
    if not Path(args.bsg).is_file():
        raise InputError(f"BSG file not found: {args.bsg}")
    graph = bsgmod.load_bsg(args.bsg)
    cloud, _, fx = _load_cloud(args)
    cfg = _resolve_config(args, fx)
    stage.record(event="config", config=cfg.to_dict())
    _run_evaluate(stage, graph, cloud, cfg, args.output)


def _centers(args, fixture_centers):
    if args.center:
        return np.asarray(args.center, dtype=float)
    if fixture_centers is not None:
        return fixture_centers
    raise InputError("give at least one --center X Y Z")


def _write_table(stage, table, out):
    table.write_csv(stage.output(out))
    for r in table.rows:
        stage.record(event="study_row", key=r.key, se_m=r.se, error=r.error, nodes=r.n_nodes, w=r.w)
    if table.fit is not None:
        stage.record(event="fit", slope=table.fit[0], intercept=table.fit[1])
    stage.commit()
    print(table.summary())
    if all(r.se is None for r in table.rows):
        raise NumericalError("every study run failed")


def cmd_occlude(args, stage):
    cloud, centers, fx = _load_cloud(args)
    cfg = _resolve_config(args, fx)
    stage.record(event="config", config=cfg.to_dict())
    stage.enter("occlude")
    table = occlusion_study(cloud, _centers(args, centers), args.fractions, cfg)
    _write_table(stage, table, args.output)


def cmd_sweep(args, stage):
    cloud, _, fx = _load_cloud(args)
    fx = {k: v for k, v in fx.items() if k not in ("w", "target_N")}
    cfg = _resolve_config(args, fx)
    stage.record(event="config", config=cfg.to_dict())
    stage.enter("sweep")
    table = voxel_sweep(cloud, args.voxels, cfg)
    _write_table(stage, table, args.output)


def cmd_pipeline(args, stage):
    cloud, _, fx = _load_cloud(args)
    cfg = _resolve_config(args, fx)
    stage.record(event="config", config=cfg.to_dict())
    out = Path(args.output)
    ground = _run_ground(stage, cloud, cfg, out / "ground.ply")
    grid, cond = _run_carve(stage, cloud, ground, cfg, out / "grid.bin")
    x_bar = _run_optimize(stage, grid, cond, cfg, out / "density.bin", out / "density.ply")
    graph = _run_extract(stage, grid, cond, x_bar, cfg, out / "tree.bsg", out / "tree_mesh.ply")
    _run_evaluate(stage, graph, cloud, cfg, out / "surface_error.csv")


# -- argument parsing -------------------------------------------------------------

def _common(parser):
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config value")
    parser.add_argument("--threads", type=int, help="cap worker threads of numerical libraries")
    parser.add_argument("--log", help="JSON-lines run log (appended); defaults to run.jsonl beside the output")
    parser.add_argument("-v", "--verbose", action="store_true")


def _cloud_args(parser):
    parser.add_argument("cloud", help="ray cloud file, or fixture:five-point / fixture:two-tree")
    parser.add_argument("--format", default="raytext", choices=["raytext", "ply_points"])
    parser.add_argument("--origin", type=float, nargs=3, metavar=("X", "Y", "Z"),
                        help="sensor origin for ply_points input")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="topotree", description="Tree structure reconstruction from ray clouds.")
    parser.add_argument("--version", action="version", version=f"topotree {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ground", help="ground mesh from the lowest points")
    _cloud_args(p)
    p.add_argument("-o", "--output", default="ground.ply")
    p.set_defaults(func=cmd_ground)

    p = sub.add_parser("carve", help="voxel grid, free-space caps and boundary conditions")
    _cloud_args(p)
    p.add_argument("--ground", help="ground PLY from the ground stage (rebuilt when omitted)")
    p.add_argument("-o", "--output", default="grid.bin")
    p.set_defaults(func=cmd_carve)

    p = sub.add_parser("optimize", help="density optimisation on a carved grid")
    p.add_argument("grid", help="grid file from carve, or fixture:slab")
    p.add_argument("-o", "--output", default="density.bin")
    p.add_argument("--voxels", help="also write centres of voxels with x_bar >= voxel_threshold as PLY")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("extract", help="branch structure graph from an optimised density")
    p.add_argument("density", help="density file from optimize, or fixture:column / fixture:y-tree / "
                                   "fixture:three-point")
    p.add_argument("-o", "--output", default="tree.bsg")
    p.add_argument("--mesh", help="also write a cylinder mesh PLY")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("evaluate", help="surface error of a graph against a ray cloud")
    p.add_argument("bsg")
    _cloud_args(p)
    p.add_argument("-o", "--output", default="surface_error.csv")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("occlude", help="sphere occlusion study")
    _cloud_args(p)
    p.add_argument("--center", type=float, nargs=3, action="append", metavar=("X", "Y", "Z"))
    p.add_argument("--fractions", type=float, nargs="+", default=[0.0, 0.125, 0.25, 0.375, 0.5])
    p.add_argument("-o", "--output", default="occlusion.csv")
    p.set_defaults(func=cmd_occlude)

    p = sub.add_parser("sweep", help="surface error against voxel count")
    _cloud_args(p)
    p.add_argument("--voxels", type=int, nargs="+", required=True, help="target voxel counts")
    p.add_argument("-o", "--output", default="sweep.csv")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("pipeline", help="all stages into one output directory")
    _cloud_args(p)
    p.add_argument("-o", "--output", default="topotree_out", help="output directory")
    p.set_defaults(func=cmd_pipeline)

    for name, sp in sub.choices.items():
        _common(sp)
    return parser


def _default_log(args) -> Path:
    if args.log:
        return Path(args.log)
    out = Path(args.output)
    base = out if args.command == "pipeline" else out.parent
    base.mkdir(parents=True, exist_ok=True)
    return base / "run.jsonl"


def _thread_limit(n):
    if n is None:
        return nullcontext()
    if n < 1:
        raise ConfigError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    stage = Stage(None)
    try:
        stage = Stage(_default_log(args))
        stage.record(event="start", command=args.command, argv=sys.argv[1:] if argv is None else list(argv),
                     version=__version__, threads=args.threads)
        with _thread_limit(args.threads):
            args.func(args, stage)
    except ConfigError as exc:
        return _fail(stage, exc, "config error", EXIT_CONFIG)
    except NumericalError as exc:
        return _fail(stage, exc, "numerical failure", EXIT_NUMERICAL)
    except (InputError, OSError) as exc:
        return _fail(stage, exc, "input error", EXIT_INPUT)
    except TopoTreeError as exc:
        return _fail(stage, exc, "error", EXIT_INPUT)
    stage.record(event="done", status="ok")
    return EXIT_OK


def _fail(stage: Stage, exc: Exception, kind: str, code: int) -> int:
    msg = f"topotree [{stage.name}]: {kind}: {exc}"
    print(msg, file=sys.stderr)
    left = [tmp for tmp, _ in stage.pending if os.path.exists(tmp)]
    if left:
        print("partial outputs left as: " + ", ".join(left), file=sys.stderr)
    try:
        stage.record(event="done", status="failed", stage=stage.name, error=str(exc), exit_code=code)
    except OSError:
        pass
    return code


if __name__ == "__main__":
    sys.exit(main())
