"""Branch structure graphs extracted from an optimised density grid.

The extraction grows a density-weighted shortest-path forest from the ground,
buckets voxels by Euclidean path length into slabs two voxels deep, splits each
bucket into connected segments and emits one node per segment at the segment's
density-weighted centroid.
"""

from __future__ import annotations

import itertools
from collections import Counter
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from .errors import InputError, ParseError
from .ply import write_ply_mesh

MOORE = np.array([o for o in itertools.product((-1, 0, 1), repeat=3) if o != (0, 0, 0)], dtype=np.int64)
_BUCKET_EPS = 1e-9


@dataclass
class BranchStructureGraph:
    positions: np.ndarray
    parents: np.ndarray
    radii: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.parents = np.asarray(self.parents, dtype=np.int64).reshape(-1)
        self.radii = np.asarray(self.radii, dtype=float).reshape(-1)
        if not (len(self.positions) == len(self.parents) == len(self.radii)):
            raise InputError("positions, parents and radii differ in length")

    def __len__(self) -> int:
        return len(self.parents)

    @classmethod
    def empty(cls) -> "BranchStructureGraph":
        return cls(np.zeros((0, 3)), np.zeros(0, dtype=np.int64), np.zeros(0))

    @property
    def roots(self) -> np.ndarray:
        return np.flatnonzero(self.parents < 0)

    def children(self) -> list[list[int]]:
        kids = [[] for _ in range(len(self))]
        for i, p in enumerate(self.parents):
            if p >= 0:
                kids[p].append(i)
        return kids

    def edges(self) -> np.ndarray:
        """``(parent, child)`` index pairs, one per cylinder."""
        child = np.flatnonzero(self.parents >= 0)
        return np.column_stack([self.parents[child], child])

    def root_of(self) -> np.ndarray:
        check_acyclic(self.parents)
        root = np.arange(len(self))
        for _ in range(len(self)):
            nxt = np.where(self.parents[root] >= 0, self.parents[root], root)
            if np.array_equal(nxt, root):
                break
            root = nxt
        return root

    def __eq__(self, other):
        if not isinstance(other, BranchStructureGraph):
            return NotImplemented
        return (np.array_equal(self.positions, other.positions) and np.array_equal(self.parents, other.parents)
                and np.array_equal(self.radii, other.radii))


def check_acyclic(parents) -> None:
    """Raise if following parent links from any node fails to reach a root."""
    parents = np.asarray(parents, dtype=np.int64)
    n = len(parents)
    if np.any((parents < -1) | (parents >= n)):
        raise InputError("dangling parent index")
    state = np.zeros(n, dtype=np.int8)  # 0 new, 1 on current path, 2 done
    for start in range(n):
        path = []
        v = start
        while v >= 0 and state[v] == 0:
            state[v] = 1
            path.append(v)
            v = parents[v]
        if v >= 0 and state[v] == 1:
            raise InputError(f"cycle through node {v}")
        for u in path:
            state[u] = 2


# -- shortest-path forest ------------------------------------------------------

@dataclass
class ShortestPathForest:
    distance: np.ndarray     # density-weighted path cost, inf where unreached
    path_length: np.ndarray  # Euclidean length of the same path (m)
    parent: np.ndarray       # flat voxel index of the predecessor, -1 for sources/unreached
    sources: np.ndarray      # flat voxel indices of the sources


def source_voxels(x_bar: np.ndarray, dirichlet: np.ndarray | None, density_floor: float) -> np.ndarray:
    """Lowest non-empty voxel of each column, kept when one of its corners is a fixed node.

    The contact test stops overhanging limbs, whose lowest voxels float above
    the ground, from becoming roots of their own.
    """
    solid = np.asarray(x_bar) >= density_floor
    nx, ny, nz = solid.shape
    i, j = np.nonzero(solid.any(axis=2))
    k = np.argmax(solid[i, j], axis=1)
    if dirichlet is not None:
        d = np.asarray(dirichlet, dtype=bool)
        touches = np.zeros(len(i), dtype=bool)
        for a, b, c in itertools.product((0, 1), repeat=3):
            touches |= d[i + a, j + b, k + c]
        i, j, k = i[touches], j[touches], k[touches]
    return np.sort(np.ravel_multi_index((i, j, k), solid.shape))


def shortest_path_forest(grid, x_bar, dirichlet=None, density_floor: float = 0.01) -> ShortestPathForest:
    """Multi-source Dijkstra over the 26-neighbourhood of non-empty voxels.

    Stepping into voxel ``j`` costs ``|p_i - p_j| / x_bar_j``. The Euclidean
    length of the chosen path is accumulated separately.
    """
    if density_floor <= 0:
        raise InputError("density_floor must be positive")
    x_bar = np.asarray(x_bar, dtype=float).reshape(tuple(grid.dims))
    shape = x_bar.shape
    n_all = x_bar.size
    solid = x_bar >= density_floor
    sources = source_voxels(x_bar, dirichlet, density_floor)
    if len(sources) == 0:
        raise InputError("no source voxels: nothing non-empty touches the ground")

    ids = np.flatnonzero(solid)
    compact = np.full(n_all, -1, dtype=np.int64)
    compact[ids] = np.arange(len(ids))
    coords = np.column_stack(np.unravel_index(ids, shape))
    rows, cols, vals = [], [], []
    xb = x_bar.reshape(-1)
    for off in MOORE:
        nb = coords + off
        ok = np.all((nb >= 0) & (nb < np.asarray(shape)), axis=1)
        j = np.ravel_multi_index(tuple(nb[ok].T), shape)
        ok2 = solid.reshape(-1)[j]
        src = np.flatnonzero(ok)[ok2]
        dst = j[ok2]
        rows.append(src)
        cols.append(compact[dst])
        vals.append(np.full(len(dst), np.linalg.norm(off) * grid.w) / xb[dst])
    G = coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                   shape=(len(ids), len(ids))).tocsr()
    dist_c, pred_c, _ = dijkstra(G, directed=True, indices=compact[sources], min_only=True,
                              return_predecessors=True)

    distance = np.full(n_all, np.inf)
    distance[ids] = dist_c
    parent = np.full(n_all, -1, dtype=np.int64)
    has = pred_c >= 0
    parent[ids[has]] = ids[pred_c[has]]
    path_length = np.full(n_all, np.inf)
    path_length[sources] = 0.0
    reached = ids[np.isfinite(dist_c)]
    order = reached[np.argsort(distance[reached], kind="stable")]
    w = grid.w
    for v in order:
        p = parent[v]
        if p >= 0:
            d = np.subtract(np.unravel_index(v, shape), np.unravel_index(p, shape))
            path_length[v] = path_length[p] + w * float(np.sqrt(np.dot(d, d)))
    return ShortestPathForest(distance.reshape(shape), path_length.reshape(shape),
                              parent.reshape(shape), sources)


# -- extraction ------------------------------------------------------------------

@dataclass
class Segment:
    voxels: np.ndarray   # flat voxel indices
    parent: int          # parent segment index or -1
    bucket: int


def bucket_index(path_length, w: float) -> np.ndarray:
    """Distance bucket of each voxel; buckets are ``2 w`` deep."""
    with np.errstate(invalid="ignore"):
        b = np.floor(np.asarray(path_length) / (2.0 * w) + _BUCKET_EPS)
    return np.where(np.isfinite(b), b, -1).astype(np.int64)


def _components(flat_ids: np.ndarray, shape) -> list[np.ndarray]:
    """26-connected components of a voxel set, ordered by their smallest index."""
    if len(flat_ids) == 0:
        return []
    coords = np.column_stack(np.unravel_index(flat_ids, shape))
    lo = coords.min(axis=0)
    local = coords - lo
    box = np.zeros(tuple(local.max(axis=0) + 1), dtype=bool)
    box[tuple(local.T)] = True
    labels, n = ndimage.label(box, structure=np.ones((3, 3, 3), dtype=bool))
    lab = labels[tuple(local.T)]
    order = np.argsort(flat_ids, kind="stable")
    comps = {}
    for i in order:
        comps.setdefault(lab[i], []).append(flat_ids[i])
    return [np.asarray(c, dtype=np.int64) for c in comps.values()]


def segment_voxels(grid, x_bar, forest: ShortestPathForest, threshold_fraction: float = 0.25) -> list[Segment]:
    """Split the distance buckets into connected, thresholded segments."""
    shape = tuple(grid.dims)
    xb = np.asarray(x_bar, dtype=float).reshape(-1)
    dist = forest.distance.reshape(-1)
    parent = forest.parent.reshape(-1)
    bucket = bucket_index(forest.path_length.reshape(-1), grid.w)
    reached = np.flatnonzero(bucket >= 0)
    if len(reached) == 0:
        return []
    seg_of = np.full(xb.size, -1, dtype=np.int64)
    up = np.full(xb.size, -1, dtype=np.int64)   # nearest segment on the path, earlier buckets only
    anc = np.full(xb.size, -1, dtype=np.int64)  # nearest segment on the path, the voxel included
    segments: list[Segment] = []
    seg_max: list[float] = []

    order = reached[np.lexsort((reached, dist[reached], bucket[reached]))]
    splits = np.flatnonzero(np.diff(bucket[order])) + 1
    for vox in np.split(order, splits):
        b = bucket[vox[0]]
        for v in vox:  # ascending distance, so same-bucket predecessors come first
            p = parent[v]
            if p < 0:
                up[v] = -1
            elif bucket[p] < b:
                up[v] = anc[p]
            else:
                up[v] = up[p]
        thr = np.empty(len(vox))
        has = up[vox] >= 0
        thr[has] = threshold_fraction * np.asarray(seg_max)[up[vox[has]]] if has.any() else 0.0
        rootless = vox[~has]
        if len(rootless):
            pos = {v: i for i, v in enumerate(vox)}
            for comp in _components(rootless, shape):
                t = threshold_fraction * xb[comp].max()
                for v in comp:
                    thr[pos[v]] = t
        keep = vox[xb[vox] >= thr]
        for comp in _components(keep, shape):
            votes = Counter(int(u) for u in up[comp] if u >= 0)
            if votes:
                best = max(votes.values())
                par = min(s for s, c in votes.items() if c == best)
            else:
                par = -1
            seg_of[comp] = len(segments)
            segments.append(Segment(comp, par, int(b)))
            seg_max.append(float(xb[comp].max()))
        for v in vox:  # parents precede children within the bucket
            p = parent[v]
            anc[v] = seg_of[v] if seg_of[v] >= 0 else (anc[p] if p >= 0 and bucket[p] == b else up[v])
    return segments


def extract_bsg(grid, x_bar, forest: ShortestPathForest, threshold_fraction: float = 0.25,
                crop_fraction: float = 0.25) -> BranchStructureGraph:
    """Branch structure graph with one node per segment.

    Node position is the density-weighted segment centroid and radius
    ``w * sqrt(sum(x_bar) / (2 pi))``. Subtrees whose every node is thinner
    than ``crop_fraction * w`` are dropped.
    """
    if forest is None or not np.any(np.isfinite(forest.distance)):
        raise InputError("empty shortest-path forest")
    segments = segment_voxels(grid, x_bar, forest, threshold_fraction)
    if not segments:
        return BranchStructureGraph.empty()
    shape = tuple(grid.dims)
    xb = np.asarray(x_bar, dtype=float).reshape(-1)
    n = len(segments)
    pos = np.empty((n, 3))
    rad = np.empty(n)
    par = np.array([s.parent for s in segments], dtype=np.int64)
    for i, s in enumerate(segments):
        wts = xb[s.voxels]
        centres = grid.origin + (np.column_stack(np.unravel_index(s.voxels, shape)) + 0.5) * grid.w
        pos[i] = wts @ centres / wts.sum()
        rad[i] = grid.w * np.sqrt(wts.sum() / (2.0 * np.pi))

    # parents always precede children, so a reverse sweep sees whole subtrees
    small = rad < crop_fraction * grid.w
    all_small = small.copy()
    for i in range(n - 1, -1, -1):
        if par[i] >= 0 and not all_small[i]:
            all_small[par[i]] = False
    keep = ~all_small
    new_id = np.full(n, -1, dtype=np.int64)
    new_id[keep] = np.arange(keep.sum())
    parents = np.where(par[keep] >= 0, new_id[np.maximum(par[keep], 0)], -1)
    bsg = BranchStructureGraph(pos[keep], parents, rad[keep])
    check_acyclic(bsg.parents)
    return bsg


# -- I/O -------------------------------------------------------------------------

BSG_HEADER = "# bsg v1"


def save_bsg(bsg: BranchStructureGraph, path) -> None:
    with open(path, "w") as fh:
        fh.write(BSG_HEADER + "\n")
        for i in range(len(bsg)):
            x, y, z = (repr(float(c)) for c in bsg.positions[i])
            fh.write(f"{i} {int(bsg.parents[i])} {x} {y} {z} {float(bsg.radii[i])!r}\n")


def load_bsg(path) -> BranchStructureGraph:
    pos, par, rad = [], [], []
    with open(path) as fh:
        first = fh.readline()
        if first.strip() != BSG_HEADER:
            raise ParseError(f"missing header {BSG_HEADER!r}", 1)
        for line_no, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            tok = line.split()
            if len(tok) != 6:
                raise ParseError(f"expected 6 fields, found {len(tok)}", line_no)
            try:
                i, p = int(tok[0]), int(tok[1])
                vals = [float(t) for t in tok[2:]]
            except ValueError as exc:
                raise ParseError(str(exc), line_no) from None
            if i != len(pos):
                raise ParseError(f"node ids must be dense from 0, found {i}", line_no)
            if not np.all(np.isfinite(vals)):
                raise ParseError("non-finite value", line_no)
            pos.append(vals[:3])
            par.append(p)
            rad.append(vals[3])
    parents = np.asarray(par, dtype=np.int64)
    bad = np.flatnonzero((parents < -1) | (parents >= len(parents)))
    if len(bad):
        raise ParseError(f"dangling parent index {parents[bad[0]]}", int(bad[0]) + 2)
    try:
        check_acyclic(parents)
    except InputError as exc:
        raise ParseError(str(exc)) from None
    return BranchStructureGraph(np.reshape(pos, (-1, 3)), parents, np.asarray(rad))


def _orthonormal(axis: np.ndarray):
    a = axis / np.linalg.norm(axis)
    helper = np.array([1.0, 0.0, 0.0]) if abs(a[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(a, helper)
    u /= np.linalg.norm(u)
    return u, np.cross(a, u)


def cylinder_mesh(bsg: BranchStructureGraph, sides: int = 12):
    """Open cylinders, one per parent-child edge, with the child's radius."""
    if sides < 3:
        raise InputError("a cylinder needs at least 3 sides")
    verts, faces = [], []
    ang = 2.0 * np.pi * np.arange(sides) / sides
    for p, c in bsg.edges():
        a, b = bsg.positions[p], bsg.positions[c]
        axis = b - a
        if not np.linalg.norm(axis) > 0:
            continue
        u, v = _orthonormal(axis)
        ring = bsg.radii[c] * (np.cos(ang)[:, None] * u + np.sin(ang)[:, None] * v)
        base = sum(len(x) for x in verts)
        verts.append(np.vstack([a + ring, b + ring]))
        i = np.arange(sides)
        j = (i + 1) % sides
        faces.append(np.column_stack([base + i, base + j, base + sides + j]))
        faces.append(np.column_stack([base + i, base + sides + j, base + sides + i]))
    if not verts:
        return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)
    return np.vstack(verts), np.vstack(faces)


def export_mesh(bsg: BranchStructureGraph, path, sides: int = 12) -> None:
    verts, faces = cylinder_mesh(bsg, sides)
    write_ply_mesh(path, verts, faces)
