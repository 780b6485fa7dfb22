"""
From density to branch structure graph
======================================

A hand-built density with three tips is turned into a graph: shortest paths
from the ground, buckets two voxels deep, one node per connected segment.
"""
# %%
import tempfile
from pathlib import Path

import numpy as np

from topotree.bsg import export_mesh, extract_bsg, load_bsg, save_bsg, segment_voxels, shortest_path_forest
from topotree.synthetic import three_point_tree

grid, x_bar, dirichlet = three_point_tree(w=0.1)
forest = shortest_path_forest(grid, x_bar, dirichlet)
print("sources:", len(forest.sources), " reached voxels:", int(np.isfinite(forest.distance).sum()))

# %% each segment is a connected piece of one distance bucket
for i, seg in enumerate(segment_voxels(grid, x_bar, forest)):
    print(f"segment {i:2d}: bucket {seg.bucket}, {len(seg.voxels)} voxels, parent {seg.parent}")

# %% nodes sit at density-weighted centroids; thin leftover tips are cropped
graph = extract_bsg(grid, x_bar, forest)
for i in range(len(graph)):
    x, _, z = graph.positions[i]
    print(f"node {i:2d}: parent {graph.parents[i]:2d}  x={x:.3f} z={z:.3f}  r={graph.radii[i]:.4f}")

# %%
out = Path(tempfile.mkdtemp(prefix="topotree-"))
save_bsg(graph, out / "tree.bsg")
export_mesh(graph, out / "tree_mesh.ply")
assert load_bsg(out / "tree.bsg") == graph
print("wrote", out / "tree.bsg", "and", out / "tree_mesh.ply")
