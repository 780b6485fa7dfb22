"""
Ground surface and free-space carving
=====================================

Builds a synthetic scan of two trees, estimates the ground from its lowest
points and carves the voxel grid with every ray to find where material may go.
"""
# %%
import numpy as np

from topotree.ground import build_ground, lowest_points
from topotree.synthetic import two_tree_scene
from topotree.voxelgrid import assign_conditions, build_grid, carve_free_space

scene = two_tree_scene(step=0.75, thickness=2.0)
cloud = scene.cloud
print(f"{len(cloud)} rays, {int(cloud.hits.sum())} hits")

# %% a point belongs to the ground when nothing lies below its slope-g cone
low = lowest_points(cloud, g=1.0)
ground = build_ground(cloud, g=1.0)
print(f"{len(low)} lowest points -> {len(ground.triangles)} ground triangles ({ground.status})")
print("ground height under each tree:", np.round(ground.heights(scene.centers[:, :2]), 4))

# %% every subvoxel a ray passes through is free space; the rest caps the density
grid = carve_free_space(build_grid(cloud, w=0.14), cloud)
print(f"grid {grid.dims}, w = {grid.w:.3f} m, {grid.v_filled} voxels may hold material")
open_cells = grid.x_max[grid.x_max > 0]
print(f"{np.mean(grid.x_max == 0):.0%} of voxels are fully carved; "
      f"median cap of the rest is {np.median(open_cells):.3f}")

# %% tree points load the nodes, the node layer nearest the ground is held fixed
cond = assign_conditions(grid, cloud, ground, exclusion=0.3)
print(f"{int(np.count_nonzero(cond.loads))} loaded nodes, {int(cond.dirichlet.sum())} fixed nodes")
