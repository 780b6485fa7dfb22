"""
Branching on a one-voxel slab
=============================

Five point loads drain into a narrow ground sink. The branch-angle exponent
alpha rewards thick shared trunks, which pushes the lowest fork upwards.
"""
# %%
import numpy as np

from topotree import topopt
from topotree.bsg import extract_bsg, shortest_path_forest
from topotree.synthetic import slab_fixture

grid, cond, loads, sink = slab_fixture()


def show(x_bar):
    rows = []
    for k in range(grid.dims[2] - 1, -1, -1):
        rows.append("".join("#" if v >= 0.5 else ("+" if v >= 0.1 else ".") for v in x_bar[:, 0, k]))
    return "\n".join(rows)


# %%
for alpha in (0.0, 0.25, 0.5, 1.0):
    cfg = topopt.OptimizerConfig(alpha=alpha, v_max=0.2 * grid.N)
    res = topopt.optimize(grid, cond, cfg)
    graph = extract_bsg(grid, res.x_bar, shortest_path_forest(grid, res.x_bar, cond.dirichlet))
    forks = [i for i, kids in enumerate(graph.children()) if len(kids) >= 2]
    lowest = min(graph.positions[i, 2] for i in forks)
    print(f"alpha = {alpha}: compliance {res.log[-1]['compliance']:.4g}, lowest fork at z = {lowest:.2f}")
    if alpha in (0.0, 1.0):
        print(show(res.x_bar), end="\n\n")
