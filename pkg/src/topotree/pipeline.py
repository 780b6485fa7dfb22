"""End-to-end reconstruction: ray cloud to branch structure graph."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field, fields

import numpy as np

from . import bsg as bsgmod
from .errors import ConfigError
from .ground import GroundMesh, build_ground
from .topopt import OptimizationResult, OptimizerConfig, linear_ramp, optimize
from .voxelgrid import NodalConditions, VoxelGrid, assign_conditions, build_grid, carve_free_space

log = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    alpha: float = 1.0
    iterations: int = 20
    p_start: float = 1.0
    p_end: float = 3.0
    beta_start: float = 1.0
    beta_end: float = 4.0
    R: float = 1.75
    E_S: float = 1.0
    E_V: float = 1e-4
    kernel_radius: float = 8.0
    move: float = 0.2
    damping: float = 0.5
    eps_A: float = 1e-6
    cg_tol: float = 1e-6
    cg_max_iter: int | None = None
    v_max: float | None = None
    v_max_ratio: float = 0.2  # of v_filled, used when v_max is unset
    g: float = 1.0
    exclusion_height: float = 0.3
    target_N: int | None = 5_000_000
    w: float | None = None
    density_floor: float = 0.01
    threshold_fraction: float = 0.25
    crop_fraction: float = 0.25
    mesh_sides: int = 12
    voxel_threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.w is not None:
            if not self.w > 0:
                raise ConfigError("w must be positive")
        elif self.target_N is None or self.target_N <= 0:
            raise ConfigError("set a positive target_N or w")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.g <= 0:
            raise ConfigError("g must be positive")
        if self.density_floor <= 0:
            raise ConfigError("density_floor must be positive")
        if self.v_max is None and not self.v_max_ratio > 0:
            raise ConfigError("v_max_ratio must be positive")
        if self.mesh_sides < 3:
            raise ConfigError("mesh_sides must be >= 3")
        if not 0.0 <= self.voxel_threshold <= 1.0:
            raise ConfigError("voxel_threshold must lie in [0, 1]")
        self.optimizer_config(1.0)

    def optimizer_config(self, v_max: float) -> OptimizerConfig:
        return OptimizerConfig(
            v_max=v_max, alpha=self.alpha, iterations=self.iterations,
            p_schedule=linear_ramp(self.p_start, self.p_end, self.iterations),
            beta_schedule=linear_ramp(self.beta_start, self.beta_end, self.iterations),
            R=self.R, E_S=self.E_S, E_V=self.E_V, kernel_radius=self.kernel_radius, move=self.move,
            damping=self.damping, eps_A=self.eps_A, cg_tol=self.cg_tol, cg_max_iter=self.cg_max_iter)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "PipelineConfig":
        if "w" in changes and changes["w"] is not None and "target_N" not in changes:
            changes["target_N"] = None
        return dataclasses.replace(self, **changes)

    def with_overrides(self, items: dict[str, str]) -> "PipelineConfig":
        """Apply ``key -> string`` overrides, converting to each field's type."""
        types = {f.name: f.type for f in fields(self)}
        changes = {}
        for key, text in items.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            changes[key] = _convert(key, text, types[key])
        return self.replace(**changes)

    @classmethod
    def from_file(cls, path, overrides: dict[str, str] | None = None) -> "PipelineConfig":
        items = {}
        with open(path) as fh:
            for line_no, line in enumerate(fh, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{line_no}: expected key=value")
                key, value = (s.strip() for s in line.split("=", 1))
                items[key] = value
        items.update(overrides or {})
        return cls().with_overrides(items)

    def dumps(self) -> str:
        return "".join(f"{k} = {'none' if v is None else v}\n" for k, v in self.to_dict().items())


def _convert(key: str, text: str, typ: str):
    text = text.strip()
    optional = "None" in str(typ)
    if optional and text.lower() in ("none", ""):
        return None
    try:
        value = float(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None
    if str(typ).startswith("int"):
        if not value.is_integer():
            raise ConfigError(f"{key} must be an integer, got {text!r}")
        return int(value)
    return value


@dataclass
class PipelineResult:
    config: PipelineConfig
    ground: GroundMesh
    grid: VoxelGrid
    conditions: NodalConditions
    v_max: float
    optimization: OptimizationResult
    forest: bsgmod.ShortestPathForest
    bsg: bsgmod.BranchStructureGraph
    stages: dict = field(default_factory=dict)


def prepare_domain(cloud, config: PipelineConfig):
    """Ground, carved grid and boundary conditions for ``cloud``."""
    ground = build_ground(cloud, config.g)
    if config.w is not None:
        grid = build_grid(cloud, w=config.w)
    else:
        grid = build_grid(cloud, target_N=config.target_N)
    grid = carve_free_space(grid, cloud)
    cond = assign_conditions(grid, cloud, ground, config.exclusion_height)
    return ground, grid, cond


def resolve_v_max(grid: VoxelGrid, config: PipelineConfig) -> float:
    if config.v_max is not None:
        return float(config.v_max)
    return config.v_max_ratio * grid.v_filled


def run_pipeline(cloud, config: PipelineConfig | None = None, callback=None) -> PipelineResult:
    config = config or PipelineConfig()
    ground, grid, cond = prepare_domain(cloud, config)
    v_max = resolve_v_max(grid, config)
    log.info("grid %s w=%.4g v_filled=%d v_max=%.6g", grid.dims, grid.w, grid.v_filled, v_max)
    opt = optimize(grid, cond, config.optimizer_config(v_max), callback=callback)
    forest = bsgmod.shortest_path_forest(grid, opt.x_bar, cond.dirichlet, config.density_floor)
    graph = bsgmod.extract_bsg(grid, opt.x_bar, forest, config.threshold_fraction, config.crop_fraction)
    return PipelineResult(config, ground, grid, cond, v_max, opt, forest, graph)


def tree_points(cloud, ground: GroundMesh, exclusion_height: float) -> np.ndarray:
    """Hit points at least ``exclusion_height`` above the ground surface."""
    pts = cloud.points
    above = pts[:, 2] - ground.heights_extended(pts[:, :2])
    return pts[above >= exclusion_height]
