"""Terrain estimation with the sand-slope "lowest points" rule.

A point is a lowest point when no other point lies below the cone of slope
``g`` hanging from it: ``z_i - z_j < g * |xy_i - xy_j|`` for every ``j``.
The lowest points are triangulated in the horizontal plane and their heights
interpolated linearly inside each triangle.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.spatial import Delaunay, QhullError, cKDTree

from .errors import InputError, ParseError
from .ply import read_ply_mesh, write_ply_mesh

log = logging.getLogger(__name__)


def _as_points(cloud_or_points) -> np.ndarray:
    pts = getattr(cloud_or_points, "points", cloud_or_points)
    return np.asarray(pts, dtype=float).reshape(-1, 3)


def lowest_points_bruteforce(points, g: float) -> np.ndarray:
    """Reference O(n^2) evaluation of the lowest-points predicate."""
    pts = np.unique(_as_points(points), axis=0)
    keep = np.ones(len(pts), dtype=bool)
    for start in range(0, len(pts), 512):
        p = pts[start:start + 512]
        d = np.hypot(p[:, None, 0] - pts[None, :, 0], p[:, None, 1] - pts[None, :, 1])
        viol = (p[:, None, 2] - pts[None, :, 2]) >= g * d
        viol[np.arange(len(p)), np.arange(start, start + len(p))] = False
        keep[start:start + len(p)] = ~viol.any(axis=1)
    return pts[keep]


def lowest_points(cloud, g: float = 1.0, cell: float | None = None) -> np.ndarray:
    """Points of ``cloud`` that no other point undercuts by slope ``g``.

    Exact duplicates are merged first (a duplicate would otherwise disqualify
    its twin). Returned rows are sorted lexicographically.
    """
    if g <= 0:
        raise InputError("ground slope g must be positive")
    pts = np.unique(_as_points(cloud), axis=0)
    if len(pts) == 0:
        raise InputError("cannot estimate ground from an empty cloud")
    n = len(pts)
    xy, z = pts[:, :2], pts[:, 2]
    lo = xy.min(axis=0)
    extent = float(np.max(xy.max(axis=0) - lo))
    if cell is None:
        cell = extent / max(np.sqrt(n / 4.0), 1.0) if extent > 0 else 1.0
    keys = np.floor((xy - lo) / cell).astype(np.int64)
    shape = keys.max(axis=0) + 1
    flat = keys[:, 0] * shape[1] + keys[:, 1]

    # lowest point of every occupied cell
    order = np.lexsort((z, flat))
    first = np.ones(n, dtype=bool)
    first[1:] = flat[order][1:] != flat[order][:-1]
    cell_min = np.full(int(shape[0] * shape[1]), -1, dtype=np.int64)
    cell_min[flat[order][first]] = order[first]

    # cheap pass: test each point against the lowest point of the 3x3 neighbouring cells
    alive = np.ones(n, dtype=bool)
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            kx, ky = keys[:, 0] + dx, keys[:, 1] + dy
            inside = (kx >= 0) & (kx < shape[0]) & (ky >= 0) & (ky < shape[1])
            j = np.full(n, -1, dtype=np.int64)
            j[inside] = cell_min[kx[inside] * shape[1] + ky[inside]]
            has = (j >= 0) & (j != np.arange(n))
            jj = j[has]
            d = np.hypot(xy[has, 0] - xy[jj, 0], xy[has, 1] - xy[jj, 1])
            viol = (z[has] - z[jj]) >= g * d
            alive[np.flatnonzero(has)[viol]] = False

    # exact pass for survivors: violators lie within (z_i - z_min) / g horizontally
    cand = np.flatnonzero(alive)
    zmin = z.min()
    tree = cKDTree(xy)
    radii = (z[cand] - zmin) / g
    neighbours = tree.query_ball_point(xy[cand], radii * (1 + 1e-12) + 1e-12)
    for i, nb in zip(cand, neighbours):
        nb = np.asarray(nb, dtype=np.int64)
        nb = nb[nb != i]
        if len(nb) == 0:
            continue
        d = np.hypot(xy[i, 0] - xy[nb, 0], xy[i, 1] - xy[nb, 1])
        if np.any((z[i] - z[nb]) >= g * d):
            alive[i] = False
    return pts[alive]


@dataclass
class GroundMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    gradient_g: float
    status: str = "ok"  # or "plane_fallback"
    plane_height: float | None = None
    _tri: Delaunay | None = field(default=None, repr=False, compare=False)

    _patch: tuple | None = field(default=None, repr=False, compare=False)

    @property
    def delaunay(self) -> Delaunay | None:
        """Qhull triangulation of the vertices, used for point location."""
        if self._tri is None and len(self.triangles):
            self._tri = Delaunay(self.vertices[:, :2])
        return self._tri

    def _locate(self, xy):
        """Containing triangle (row of ``triangles``) and barycentric weights; -1 outside."""
        tri = self.delaunay
        if self._patch is None:
            key = {tuple(sorted(t)): i for i, t in enumerate(self.triangles.tolist())}
            own = np.array([key.get(tuple(sorted(t)), -1) for t in tri.simplices.tolist()], dtype=np.int64)
            used = set(own[own >= 0].tolist())
            extra = np.array([i for i in range(len(self.triangles)) if i not in used], dtype=np.int64)
            self._patch = (own, extra)
        own, extra = self._patch
        simplex = tri.find_simplex(xy)
        idx = np.where(simplex >= 0, own[np.maximum(simplex, 0)], -1)
        idx[simplex < 0] = -2
        bary = np.zeros((len(xy), 3))
        stale = np.flatnonzero(idx == -1)
        if len(stale):
            # points in Qhull triangles replaced by edge flips: the replacements
            # tile the same area, so take the one the point is most inside
            corners = self.vertices[self.triangles[extra], :2]
            inv = np.linalg.inv(np.stack([corners[:, 0] - corners[:, 2], corners[:, 1] - corners[:, 2]], axis=2))
            for chunk in np.array_split(stale, max(1, len(stale) * len(extra) // 2_000_000 + 1)):
                rel = xy[chunk, None, :] - corners[None, :, 2]
                l12 = np.einsum("tij,ptj->pti", inv, rel)
                b = np.concatenate([l12, 1.0 - l12.sum(axis=2, keepdims=True)], axis=2)
                best = np.argmax(b.min(axis=2), axis=1)
                idx[chunk] = extra[best]
                bary[chunk] = b[np.arange(len(chunk)), best]
        ok = idx >= 0
        fast = ok & (simplex >= 0) & (own[np.maximum(simplex, 0)] >= 0)
        if fast.any():
            s = simplex[fast]
            T = tri.transform[s]
            b = np.einsum("ijk,ik->ij", T[:, :2], xy[fast] - T[:, 2])
            qb = np.column_stack([b, 1.0 - b.sum(axis=1)])
            # reorder Qhull's vertex order to the stored triangle's
            qs = tri.simplices[s]
            ts = self.triangles[idx[fast]]
            perm = np.argmax(ts[:, :, None] == qs[:, None, :], axis=2)
            bary[fast] = np.take_along_axis(qb, perm, axis=1)
        return np.where(ok, idx, -1), bary

    def heights(self, xy) -> np.ndarray:
        """Interpolated ground heights; NaN outside the triangulation."""
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        if self.status == "plane_fallback":
            return np.full(len(xy), self.plane_height)
        idx, bary = self._locate(xy)
        out = np.full(len(xy), np.nan)
        ok = idx >= 0
        if ok.any():
            zv = self.vertices[self.triangles[idx[ok]], 2]
            out[ok] = np.sum(bary[ok] * zv, axis=1)
        return out

    def heights_extended(self, xy) -> np.ndarray:
        """Heights everywhere: outside the hull use the nearest hull-boundary point."""
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        h = self.heights(xy)
        out = np.isnan(h)
        if out.any():
            tri = self.delaunay
            edges = tri.convex_hull
            a = self.vertices[edges[:, 0]]
            b = self.vertices[edges[:, 1]]
            q = xy[out]
            ab = b[:, :2] - a[:, :2]
            L2 = np.einsum("ij,ij->i", ab, ab)
            t = np.einsum("qij,ij->qi", q[:, None, :] - a[None, :, :2], ab) / L2
            t = np.clip(t, 0.0, 1.0)
            closest = a[None, :, :2] + t[..., None] * ab[None]
            d2 = np.sum((q[:, None, :] - closest) ** 2, axis=2)
            e = np.argmin(d2, axis=1)
            te = t[np.arange(len(q)), e]
            h[out] = a[e, 2] + te * (b[e, 2] - a[e, 2])
        return h


def _exact_orient(a, b, c) -> int:
    a, b, c = ([Fraction(float(v)) for v in p] for p in (a, b, c))
    d = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    return (d > 0) - (d < 0)


def _exact_incircle(a, b, c, d) -> int:
    """Sign of the incircle determinant; positive when d is inside ccw triangle abc."""
    rows = []
    for p in (a, b, c):
        dx, dy = Fraction(float(p[0])) - Fraction(float(d[0])), Fraction(float(p[1])) - Fraction(float(d[1]))
        rows.append((dx, dy, dx * dx + dy * dy))
    (a1, a2, a3), (b1, b2, b3), (c1, c2, c3) = rows
    det = a1 * (b2 * c3 - b3 * c2) - a2 * (b1 * c3 - b3 * c1) + a3 * (b1 * c2 - b2 * c1)
    return (det > 0) - (det < 0)


def _incircle_sign(xy, a, b, c, d) -> int:
    """Float incircle with a conservative error filter, exact when too close to call."""
    rows = xy[[a, b, c]] - xy[d]
    lift = np.sum(rows ** 2, axis=1)
    m = np.column_stack([rows, lift])
    det = np.linalg.det(m)
    bound = 1e-10 * float(np.prod(np.abs(rows[:, 0]) + np.abs(rows[:, 1]) + lift, dtype=float) + 1e-300)
    if abs(det) > bound:
        return 1 if det > 0 else -1
    return _exact_incircle(xy[a], xy[b], xy[c], xy[d])


def make_delaunay(xy, simplices) -> np.ndarray:
    """Flip edges of a triangulation until every triangle passes the exact empty-circle test.

    Qhull's output is Delaunay only up to round-off, so nearly cocircular
    point sets can leave a vertex a hair inside a neighbour's circumcircle.
    Triangles come back counter-clockwise.
    """
    xy = np.asarray(xy, dtype=float)
    tris = [list(t) for t in np.asarray(simplices, dtype=np.int64).tolist()]
    for t in tris:
        if _exact_orient(*xy[t]) < 0:
            t[1], t[2] = t[2], t[1]
    edges: dict[tuple[int, int], list[int]] = {}
    for i, t in enumerate(tris):
        for k in range(3):
            edges.setdefault(tuple(sorted((t[k], t[(k + 1) % 3]))), []).append(i)

    def opposite(t, a, b):
        return next(v for v in t if v != a and v != b)

    stack = [e for e, owners in edges.items() if len(owners) == 2]
    flips = 0
    while stack:
        e = stack.pop()
        owners = edges.get(e)
        if owners is None or len(owners) != 2:
            continue
        t1, t2 = owners
        a, b = e
        c, d = opposite(tris[t1], a, b), opposite(tris[t2], a, b)
        # orient t1 as (a, b, c) counter-clockwise
        if _exact_orient(xy[a], xy[b], xy[c]) < 0:
            a, b = b, a
        if _incircle_sign(xy, a, b, c, d) <= 0:
            continue
        # replace diagonal a-b with c-d: triangles (a, d, c) and (d, b, c)
        tris[t1], tris[t2] = [a, d, c], [d, b, c]
        del edges[e]
        edges[tuple(sorted((c, d)))] = [t1, t2]
        for (u, v), old, new in (((b, d), t2, t2), ((a, d), t2, t1), ((b, c), t1, t2), ((a, c), t1, t1)):
            key = tuple(sorted((u, v)))
            edges[key] = [new if o == old else o for o in edges[key]]
            stack.append(key)
        flips += 1
    if flips:
        log.info("ground: %d edge flips to restore the empty-circle property", flips)
    return np.asarray(tris, dtype=np.int64).reshape(-1, 3)


def build_ground(cloud, g: float = 1.0) -> GroundMesh:
    """Triangulate the lowest points of ``cloud`` into a ground mesh.

    With fewer than three lowest points, or collinear ones, the result is a
    horizontal plane at the lowest height and ``status == "plane_fallback"``.
    """
    low = lowest_points(cloud, g)
    if len(low) >= 3:
        try:
            tri = Delaunay(low[:, :2])
        except QhullError:
            tri = None
        if tri is not None:
            simplices = make_delaunay(low[:, :2], tri.simplices)
            return GroundMesh(low, simplices, g, _tri=tri)
    log.warning("ground: %d lowest points are degenerate; using a flat plane", len(low))
    return GroundMesh(low, np.zeros((0, 3), dtype=np.int64), g, status="plane_fallback",
                      plane_height=float(low[:, 2].min()))


def height_at(mesh: GroundMesh, xy) -> float | None:
    h = float(mesh.heights(np.asarray(xy, dtype=float).reshape(1, 2))[0])
    return None if np.isnan(h) else h


def save_ground_ply(mesh: GroundMesh, path) -> None:
    write_ply_mesh(path, mesh.vertices, mesh.triangles)


def load_ground_ply(path, g: float = 1.0) -> GroundMesh:
    """Ground mesh from a PLY written by :func:`save_ground_ply`; no faces means a flat plane."""
    try:
        verts, faces = read_ply_mesh(path)
    except (ValueError, IndexError) as exc:
        raise ParseError(f"{path}: malformed ground mesh: {exc}") from None
    if len(verts) == 0:
        raise InputError(f"{path}: ground mesh has no vertices")
    if len(faces) == 0:
        return GroundMesh(verts, faces, g, status="plane_fallback", plane_height=float(verts[:, 2].min()))
    return GroundMesh(verts, faces, g)
