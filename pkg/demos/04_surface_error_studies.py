"""
Reconstruction error on a synthetic scan
========================================

Runs the whole pipeline on the two-tree scene, scores the cylinders against
the scan, then repeats with part of each tree hidden behind a sphere.
"""
# %%
from topotree.metrics import count_principal_stems, occlusion_study, surface_error, trunk_diameters
from topotree.pipeline import PipelineConfig, run_pipeline, tree_points
from topotree.synthetic import two_tree_scene

scene = two_tree_scene(step=0.75, thickness=2.0)
config = PipelineConfig(w=0.14, target_N=None)
res = run_pipeline(scene.cloud, config)
print(f"grid {res.grid.dims}, {len(res.bsg)} nodes in {len(res.bsg.roots)} trees")
print("trunk diameters (m):", trunk_diameters(res.bsg).round(3), " stems:", count_principal_stems(res.bsg))

# %% the error of each cylinder is the mean distance of its nearest points,
# averaged with cylinder surface area as the weight
ref = tree_points(scene.cloud, res.ground, config.exclusion_height)
report = surface_error(res.bsg, ref)
print(f"surface error {100 * report.se:.2f} cm over {len(report.per_cylinder)} cylinders")

# %% hide a sphere of growing size at the middle of each tree
table = occlusion_study(scene.cloud, scene.centers, [0, 0.125, 0.25], config)
print(table.summary())
