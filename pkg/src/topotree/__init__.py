"""Tree branch structure reconstruction from lidar ray clouds by density optimisation."""

__version__ = "0.1.0"

from .bsg import BranchStructureGraph, extract_bsg, load_bsg, save_bsg, shortest_path_forest
from .errors import ConfigError, ConvergenceError, InputError, NumericalError, ParseError, TopoTreeError
from .ground import GroundMesh, build_ground
from .metrics import count_principal_stems, occlusion_study, surface_error, voxel_sweep
from .pipeline import PipelineConfig, run_pipeline
from .raycloud import RayCloud, crop_box, load_raycloud, occlude_sphere, save_raycloud, subsample
from .topopt import OptimizerConfig, optimize
from .voxelgrid import VoxelGrid, assign_conditions, build_grid, carve_free_space

__all__ = [
    "BranchStructureGraph", "ConfigError", "ConvergenceError", "GroundMesh", "InputError", "NumericalError",
    "OptimizerConfig", "ParseError", "PipelineConfig", "RayCloud", "TopoTreeError", "VoxelGrid",
    "assign_conditions", "build_grid", "build_ground", "carve_free_space", "count_principal_stems", "crop_box",
    "extract_bsg", "load_bsg", "load_raycloud", "occlude_sphere", "occlusion_study", "optimize", "run_pipeline",
    "save_bsg", "save_raycloud", "shortest_path_forest", "subsample", "surface_error", "voxel_sweep",
]
