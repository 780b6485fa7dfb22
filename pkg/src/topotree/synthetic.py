"""Small deterministic fixtures: density grids and ray-cast cylinder scenes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .raycloud import RayCloud
from .voxelgrid import NodalConditions, VoxelGrid


def unit_grid(dims, w: float = 1.0, origin=(0.0, 0.0, 0.0)) -> VoxelGrid:
    """Uncarved grid with every density cap at 1."""
    dims = tuple(int(d) for d in dims)
    return VoxelGrid(dims, np.asarray(origin, dtype=float), float(w), np.ones(dims),
                     np.zeros(dims, dtype=np.int64), np.zeros(dims, dtype=np.uint64))


# -- density-domain fixtures --------------------------------------------------------

def slab_fixture(nx: int = 40, nz: int = 30, n_loads: int = 5, load: float = 0.5, sink_width: int = 3):
    """One-voxel-thick vertical slab: point loads along the top, a narrow ground sink below.

    Returns ``(grid, conditions, load_nodes, sink_nodes)`` where the node lists
    hold ``(i, k)`` lattice coordinates in the x-z plane.
    """
    grid = unit_grid((nx, 1, nz))
    loads = np.zeros((nx + 1, 2, nz + 1))
    xs = np.rint(np.linspace(0.1 * nx, 0.9 * nx, n_loads)).astype(int)
    k_top = nz - 2
    loads[xs, :, k_top] = load
    dirichlet = np.zeros_like(loads, dtype=bool)
    c = nx // 2
    sink = list(range(c - sink_width // 2, c - sink_width // 2 + sink_width))
    dirichlet[sink, :, 0] = True
    cond = NodalConditions(loads, dirichlet)
    return grid, cond, [(int(i), k_top) for i in xs], [(i, 0) for i in sink]


def solid_column(height: int = 10, w: float = 1.0):
    """Straight column of solid voxels standing on fixed ground nodes.

    Returns ``(grid, x_bar, dirichlet)``.
    """
    grid = unit_grid((3, 3, height + 2), w)
    x = np.zeros(grid.dims)
    x[1, 1, 1:height + 1] = 1.0
    dirichlet = np.zeros(grid.node_dims, dtype=bool)
    dirichlet[:, :, :2] = True
    return grid, x, dirichlet


def y_tree_density(trunk: int = 8, arm: int = 8, w: float = 1.0):
    """Solid Y: a vertical trunk splitting into two diagonal arms in the x-z plane.

    Returns ``(grid, x_bar, dirichlet)``.
    """
    nx = 2 * arm + 5
    nz = trunk + arm + 3
    grid = unit_grid((nx, 3, nz), w)
    x = np.zeros(grid.dims)
    c = nx // 2
    x[c, 1, 1:trunk + 1] = 1.0
    for s in range(1, arm + 1):
        k = trunk + s
        x[c - s, 1, k] = 1.0
        x[c + s, 1, k] = 1.0
    dirichlet = np.zeros(grid.node_dims, dtype=bool)
    dirichlet[:, :, :2] = True
    return grid, x, dirichlet


def three_point_tree(w: float = 1.0):
    """Hand-built planar tree with three tips, one voxel thick, with graded densities.

    Returns ``(grid, x_bar, dirichlet)``; the grid has 15 x 1 x 14 voxels.
    """
    nx, nz = 15, 14
    grid = unit_grid((nx, 1, nz), w)
    x = np.zeros(grid.dims)
    trunk_x = 7
    x[trunk_x, 0, 0:6] = 1.0
    x[trunk_x - 1:trunk_x + 2, 0, 1:4] = np.maximum(x[trunk_x - 1:trunk_x + 2, 0, 1:4], 0.5)
    for s in range(1, 6):  # left limb
        x[trunk_x - s, 0, 5 + s] = 0.8
    for s in range(1, 8):  # middle limb, thinning upwards
        x[trunk_x, 0, 5 + s] = 0.9 - 0.05 * s
    for s in range(1, 4):  # short right limb, then a kink
        x[trunk_x + s, 0, 5 + s] = 0.7
    x[trunk_x + 4, 0, 8:12] = 0.6
    x[2:13, 0, 0] = np.maximum(x[2:13, 0, 0], 0.05)  # faint litter on the ground
    dirichlet = np.zeros(grid.node_dims, dtype=bool)
    dirichlet[:, :, 0] = True
    return grid, x, dirichlet


# -- ray-cast scenes --------------------------------------------------------------

@dataclass
class Scene:
    cloud: RayCloud
    cylinders: np.ndarray  # (n, 7): ax ay az bx by bz radius
    centers: np.ndarray    # (trees, 3) geometric centre of each tree
    ground_box: tuple[np.ndarray, np.ndarray]


def tree_cylinders(base, height: float = 4.0, trunk_radius: float = 0.12, spread: float = 1.0,
                   lean: float = 0.0) -> np.ndarray:
    """Trunk plus two forked limbs, each ending in two twigs."""
    b = np.asarray(base, dtype=float)
    fork = b + [lean * 0.3, 0.0, 0.45 * height]
    limbs = [fork + [-spread * 0.6, 0.15, 0.3 * height], fork + [spread * 0.6, -0.15, 0.3 * height]]
    cyl = [(b, fork, trunk_radius)]
    for j, lp in enumerate(limbs):
        cyl.append((fork, lp, 0.6 * trunk_radius))
        side = -1 if j == 0 else 1
        cyl.append((lp, lp + [side * spread * 0.45, 0.2, 0.25 * height], 0.35 * trunk_radius))
        cyl.append((lp, lp + [side * spread * 0.05, -0.25, 0.25 * height], 0.35 * trunk_radius))
    return np.array([[*a, *e, r] for a, e, r in cyl])


def _ray_cylinder(o, d, a, e, r):
    """Smallest positive ray parameter hitting the lateral surface of a finite cylinder."""
    axis = e - a
    L = np.linalg.norm(axis)
    u = axis / L
    oc = o - a
    od = oc - (oc @ u)[:, None] * u
    dd = d - (d @ u)[:, None] * u
    A = np.einsum("ij,ij->i", dd, dd)
    B = 2.0 * np.einsum("ij,ij->i", od, dd)
    C = np.einsum("ij,ij->i", od, od) - r * r
    disc = B * B - 4 * A * C
    t = np.full(len(o), np.inf)
    ok = (disc >= 0) & (A > 1e-15)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    A_safe = np.where(ok, A, 1.0)
    for root in ((-B - sq) / (2 * A_safe), (-B + sq) / (2 * A_safe)):
        s = (oc @ u) + root * (d @ u)
        good = ok & (root > 1e-9) & (s >= 0) & (s <= L) & np.isinf(t)
        t = np.where(good, root, t)
    return t


def cast_rays(origin, directions, cylinders, ground_box, max_range: float = 15.0, noise: float = 0.0, rng=None):
    """Cast rays against cylinders and a flat ground rectangle at z = 0.

    Rays that hit nothing end at ``max_range`` as non-hit rays.
    """
    d = np.asarray(directions, dtype=float)
    o = np.broadcast_to(np.asarray(origin, dtype=float), d.shape).copy()
    t = np.full(len(d), np.inf)
    for c in cylinders:
        t = np.minimum(t, _ray_cylinder(o, d, c[:3], c[3:6], c[6]))
    lo, hi = ground_box
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = np.where(d[:, 2] < 0, -o[:, 2] / d[:, 2], np.inf)
    gp = o + np.where(np.isfinite(tg), tg, 0.0)[:, None] * d
    on = np.isfinite(tg) & np.all((gp[:, :2] >= lo) & (gp[:, :2] <= hi), axis=1)
    t = np.minimum(t, np.where(on, tg, np.inf))
    hit = t <= max_range
    if noise > 0:
        rng = rng or np.random.default_rng(0)
        t = np.where(hit, t + noise * rng.standard_normal(len(t)), t)
    ends = o + np.where(hit, t, max_range)[:, None] * d
    return RayCloud(o, ends, hit)


def scanner_directions(origin, target, half_azimuth: float = 40.0, elev_range=(-40.0, 70.0), step: float = 1.0):
    """Regular azimuth/elevation grid of unit directions around the direction to ``target``."""
    delta = np.asarray(target, dtype=float) - np.asarray(origin, dtype=float)
    az0 = np.degrees(np.arctan2(delta[1], delta[0]))
    az = np.radians(az0 + np.arange(-half_azimuth, half_azimuth + 1e-9, step))
    el = np.radians(np.arange(elev_range[0], elev_range[1] + 1e-9, step))
    A, E = np.meshgrid(az, el, indexing="ij")
    return np.column_stack([(np.cos(E) * np.cos(A)).ravel(), (np.cos(E) * np.sin(A)).ravel(), np.sin(E).ravel()])


def two_tree_scene(step: float = 0.5, noise: float = 0.0, seed: int = 0, separation: float = 2.6,
                   thickness: float = 1.0) -> Scene:
    """Two forked trees on flat ground seen by four scanners."""
    rng = np.random.default_rng(seed)
    cyl = np.vstack([
        tree_cylinders([-separation / 2, 0.0, 0.0], height=4.0, trunk_radius=0.13 * thickness, spread=1.1),
        tree_cylinders([separation / 2, 0.2, 0.0], height=3.6, trunk_radius=0.11 * thickness, spread=0.9),
    ])
    box = (np.array([-3.5, -2.5]), np.array([3.5, 2.5]))
    target = np.array([0.0, 0.0, 1.8])
    clouds = []
    for ang in (20.0, 110.0, 200.0, 290.0):
        a = np.radians(ang)
        origin = np.array([6.0 * np.cos(a), 6.0 * np.sin(a), 1.5])
        dirs = scanner_directions(origin, target, step=step)
        clouds.append(cast_rays(origin, dirs, cyl, box, noise=noise, rng=rng))
    cloud = RayCloud(np.vstack([c.starts for c in clouds]), np.vstack([c.ends for c in clouds]),
                     np.concatenate([c.hits for c in clouds]))
    centers = []
    for tree in (cyl[:7], cyl[7:]):
        ends = np.vstack([tree[:, :3], tree[:, 3:6]])
        centers.append(0.5 * (ends.min(axis=0) + ends.max(axis=0)))
    return Scene(cloud, cyl, np.array(centers), box)


def five_point_scene(spacing: float = 0.1) -> RayCloud:
    """Flat ground patch plus five elevated points, observed from one sensor overhead."""
    g = np.arange(-1.0, 1.0 + 1e-9, spacing)
    X, Y = np.meshgrid(g, g, indexing="ij")
    ground = np.column_stack([X.ravel(), Y.ravel(), np.zeros(X.size)])
    tips = np.array([[-0.8, 0.0, 1.5], [-0.4, 0.3, 1.6], [0.0, 0.0, 1.7], [0.4, -0.3, 1.6], [0.8, 0.0, 1.5]])
    origin = np.array([0.0, -3.0, 3.0])
    return RayCloud.from_points(np.vstack([ground, tips]), origin)
