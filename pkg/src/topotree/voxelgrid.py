"""Voxel design domain: free-space carving and boundary conditions.

Each voxel is split into 4x4x4 quarter-width subvoxels. A subvoxel crossed by
any ray is known free space; the voxel's density cap is the fraction of its 64
subvoxels that no ray crossed. Subvoxel ``(a, b, c)`` of a voxel is stored as
bit ``a + 4 b + 16 c`` of a 64-bit mask.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .errors import InputError
from .gridio import read_grid_file, write_grid_file

log = logging.getLogger(__name__)

SUB = 4


@dataclass
class VoxelGrid:
    dims: tuple[int, int, int]
    origin: np.ndarray
    w: float
    x_max: np.ndarray
    occupied_points: np.ndarray
    subvoxel_free: np.ndarray

    @property
    def N(self) -> int:
        return int(np.prod(self.dims))

    @property
    def node_dims(self) -> tuple[int, int, int]:
        return tuple(d + 1 for d in self.dims)

    def voxel_centers(self) -> np.ndarray:
        idx = np.indices(self.dims).reshape(3, -1).T
        return self.origin + (idx + 0.5) * self.w

    def node_positions(self) -> np.ndarray:
        idx = np.indices(self.node_dims).reshape(3, -1).T
        return self.origin + idx * self.w

    def voxel_index(self, pts) -> np.ndarray:
        """Integer voxel coordinates of ``pts`` (may fall outside the grid)."""
        return np.floor((np.asarray(pts, dtype=float) - self.origin) / self.w).astype(np.int64)

    @property
    def v_filled(self) -> int:
        return int(np.count_nonzero(self.occupied_points))


@dataclass
class NodalConditions:
    loads: np.ndarray
    dirichlet: np.ndarray
    dropped_load: float = 0.0


def _count_points(dims, origin, w, pts) -> np.ndarray:
    counts = np.zeros(dims, dtype=np.int64)
    if len(pts):
        idx = np.floor((pts - origin) / w).astype(np.int64)
        idx = np.clip(idx, 0, np.asarray(dims) - 1)
        np.add.at(counts, tuple(idx.T), 1)
    return counts


def build_grid(cloud, target_N: int | None = None, w: float | None = None) -> VoxelGrid:
    """Cubic grid over the cloud's hit bounds, padded by one voxel on every side.

    With ``target_N`` the width is ``cbrt(bounds volume / target_N)`` rounded to
    the nearest centimetre (at least 1 cm).
    """
    if (target_N is None) == (w is None):
        raise InputError("give exactly one of target_N or w")
    bounds = cloud.bounds
    if bounds is None:
        raise InputError("cannot build a grid over a cloud with no hit points")
    lo, hi = bounds
    extent = hi - lo
    if w is None:
        if target_N <= 0:
            raise InputError("target_N must be positive")
        w = max(round(float(np.cbrt(np.prod(extent) / target_N)), 2), 0.01)
    if not w > 0:
        raise InputError("voxel width must be positive")
    core = np.maximum(np.ceil(extent / w - 1e-9).astype(np.int64), 1)
    dims = tuple(int(c) + 2 for c in core)
    origin = lo - w
    occupied = _count_points(dims, origin, w, cloud.points)
    return VoxelGrid(dims, origin, float(w), np.ones(dims), occupied, np.zeros(dims, dtype=np.uint64))


# -- free-space carving --------------------------------------------------------

def traverse_subvoxels(grid: VoxelGrid, starts, ends, chunk: int = 20000):
    """Subvoxels crossed by each segment, clipped to the grid.

    Returns ``(ray_index, cell)`` with ``cell`` an ``(m, 3)`` array of subvoxel
    lattice coordinates. A cell is crossed when the segment passes through its
    interior; a segment running exactly along a lattice plane is assigned to
    the cell on the upper side (floor convention).
    """
    starts = np.asarray(starts, dtype=float).reshape(-1, 3)
    ends = np.asarray(ends, dtype=float).reshape(-1, 3)
    s = grid.w / SUB
    lim = np.asarray(grid.dims, dtype=float) * SUB
    out_r, out_c = [], []
    for c0 in range(0, len(starts), chunk):
        P0 = (starts[c0:c0 + chunk] - grid.origin) / s
        D = (ends[c0:c0 + chunk] - grid.origin) / s - P0
        n = len(P0)
        t_in = np.zeros(n)
        t_out = np.ones(n)
        with np.errstate(divide="ignore", invalid="ignore"):
            for ax in range(3):
                moving = D[:, ax] != 0
                ta = (0.0 - P0[:, ax]) / D[:, ax]
                tb = (lim[ax] - P0[:, ax]) / D[:, ax]
                t_in = np.maximum(t_in, np.where(moving, np.minimum(ta, tb), -np.inf))
                t_out = np.minimum(t_out, np.where(moving, np.maximum(ta, tb), np.inf))
                outside = ~moving & ((P0[:, ax] < 0) | (P0[:, ax] >= lim[ax]))
                t_out = np.where(outside, -np.inf, t_out)
        ok = t_out > t_in
        idx = np.flatnonzero(ok)
        if len(idx) == 0:
            continue
        P0, D, t_in, t_out = P0[idx], D[idx], t_in[idx], t_out[idx]
        ray_ids = [np.arange(len(idx)), np.arange(len(idx))]
        ts = [t_in, t_out]
        for ax in range(3):
            a = P0[:, ax] + t_in * D[:, ax]
            b = P0[:, ax] + t_out * D[:, ax]
            kmin = np.floor(np.minimum(a, b)) + 1
            kmax = np.ceil(np.maximum(a, b)) - 1
            cnt = np.where(D[:, ax] != 0, np.maximum(kmax - kmin + 1, 0), 0).astype(np.int64)
            if cnt.sum() == 0:
                continue
            rid = np.repeat(np.arange(len(idx)), cnt)
            first = np.repeat(np.cumsum(cnt) - cnt, cnt)
            k = kmin[rid] + (np.arange(cnt.sum()) - first)
            ray_ids.append(rid)
            ts.append((k - P0[rid, ax]) / D[rid, ax])
        rid = np.concatenate(ray_ids)
        t = np.concatenate(ts)
        order = np.lexsort((t, rid))
        rid, t = rid[order], t[order]
        same = rid[1:] == rid[:-1]
        gap = t[1:] > t[:-1]
        sel = np.flatnonzero(same & gap)
        r = rid[sel]
        tm = 0.5 * (t[sel] + t[sel + 1])
        cell = np.floor(P0[r] + tm[:, None] * D[r]).astype(np.int64)
        cell = np.clip(cell, 0, lim.astype(np.int64) - 1)
        out_r.append(idx[r] + c0)
        out_c.append(cell)
    if not out_r:
        return np.zeros(0, dtype=np.int64), np.zeros((0, 3), dtype=np.int64)
    return np.concatenate(out_r), np.concatenate(out_c)


def _cell_to_voxel_bit(grid: VoxelGrid, cell: np.ndarray):
    vox = cell // SUB
    sub = cell % SUB
    flat = np.ravel_multi_index(tuple(vox.T), grid.dims)
    bit = (sub[:, 0] + SUB * sub[:, 1] + SUB * SUB * sub[:, 2]).astype(np.uint64)
    return flat, bit


def popcount64(mask: np.ndarray) -> np.ndarray:
    return np.bitwise_count(np.asarray(mask, dtype=np.uint64)).astype(np.int64)


def caps_from_masks(mask: np.ndarray) -> np.ndarray:
    return (64 - popcount64(mask)) / 64.0


def carve_free_space(grid: VoxelGrid, cloud) -> VoxelGrid:
    """Flag every subvoxel crossed by a ray and recompute the density caps.

    The subvoxel holding a hit endpoint is never flagged, whichever ray
    crosses it.
    """
    mask = grid.subvoxel_free.copy().reshape(-1)
    _, cells = traverse_subvoxels(grid, cloud.starts, cloud.ends)
    if len(cells):
        flat, bit = _cell_to_voxel_bit(grid, cells)
        np.bitwise_or.at(mask, flat, np.left_shift(np.uint64(1), bit))
    pts = cloud.points
    if len(pts):
        cell = np.floor((pts - grid.origin) / (grid.w / SUB)).astype(np.int64)
        inside = np.all((cell >= 0) & (cell < np.asarray(grid.dims) * SUB), axis=1)
        if inside.any():
            flat, bit = _cell_to_voxel_bit(grid, cell[inside])
            np.bitwise_and.at(mask, flat, ~np.left_shift(np.uint64(1), bit))
    mask = mask.reshape(grid.dims)
    return replace(grid, subvoxel_free=mask, x_max=caps_from_masks(mask))


# -- boundary conditions -----------------------------------------------------

def assign_conditions(grid: VoxelGrid, cloud, ground, exclusion: float = 0.3) -> NodalConditions:
    """Unit load per point at least ``exclusion`` above ground; ground band is fixed.

    A node is fixed (Dirichlet) when it lies within ``w/2`` of the ground
    surface height at its xy, which selects the node layer closest to the
    ground. Outside the ground triangulation the nearest hull-boundary height
    is used.
    """
    pts = cloud.points
    ndims = grid.node_dims
    loads = np.zeros(ndims)
    if len(pts):
        above = pts[:, 2] - ground.heights_extended(pts[:, :2])
        pts = pts[above >= exclusion]
    if len(pts):
        idx = np.rint((pts - grid.origin) / grid.w).astype(np.int64)
        idx = np.clip(idx, 0, np.asarray(ndims) - 1)
        np.add.at(loads, tuple(idx.T), 1.0)

    nodes = grid.node_positions()
    nx, ny, nz = ndims
    col_xy = nodes.reshape(nx, ny, nz, 3)[:, :, 0, :2].reshape(-1, 2)
    gh = ground.heights_extended(col_xy).reshape(nx, ny, 1)
    z = grid.origin[2] + np.arange(nz) * grid.w
    dirichlet = np.abs(z[None, None, :] - gh) <= 0.5 * grid.w

    dropped = float(loads[dirichlet].sum())
    if dropped:
        log.warning("dropping %g units of load that fall on fixed ground nodes", dropped)
        loads[dirichlet] = 0.0
    if not np.any(loads > 0):
        raise InputError("no loaded nodes: every point is below the exclusion height or on the ground")
    if not dirichlet.any():
        raise InputError("no Dirichlet nodes: the ground lies outside the grid")
    return NodalConditions(loads, dirichlet, dropped)


# -- serialisation -------------------------------------------------------------

def save_grid(path, grid: VoxelGrid, cond: NodalConditions | None = None, extra: dict | None = None) -> None:
    arrays = {
        "x_max": grid.x_max,
        "occupied_points": grid.occupied_points.astype(np.int64),
        "subvoxel_free": grid.subvoxel_free.astype(np.uint64),
    }
    if cond is not None:
        arrays["loads"] = cond.loads
        arrays["dirichlet"] = cond.dirichlet.astype(np.uint8)
        arrays["dropped_load"] = np.array([cond.dropped_load])
    arrays.update(extra or {})
    write_grid_file(path, grid.dims, grid.origin, grid.w, arrays)


def load_grid(path):
    """Return ``(grid, conditions or None, remaining arrays)``."""
    head, arrays = read_grid_file(path)
    grid = VoxelGrid(head["dims"], head["origin"], head["w"], arrays.pop("x_max"),
                     arrays.pop("occupied_points"), arrays.pop("subvoxel_free"))
    cond = None
    if "loads" in arrays:
        cond = NodalConditions(arrays.pop("loads"), arrays.pop("dirichlet").astype(bool),
                               float(arrays.pop("dropped_load", np.zeros(1))[0]))
    return grid, cond, arrays
