"""Ray clouds: lidar points plus the sensor ray that observed each of them.

A ray runs from the sensor ``start`` to ``end``. When ``hit`` is true the end is
an observed surface point; otherwise the ray only carries free-space evidence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError, ParseError
from .ply import read_ply_vertices


@dataclass(frozen=True)
class RayCloud:
    starts: np.ndarray
    ends: np.ndarray
    hits: np.ndarray

    def __post_init__(self):
        starts = np.array(self.starts, dtype=float).reshape(-1, 3)
        ends = np.array(self.ends, dtype=float).reshape(-1, 3)
        hits = np.array(self.hits, dtype=bool).reshape(-1)
        if not (len(starts) == len(ends) == len(hits)):
            raise InputError("starts, ends and hits differ in length")
        if not (np.all(np.isfinite(starts)) and np.all(np.isfinite(ends))):
            raise InputError("non-finite ray coordinate")
        for a in (starts, ends, hits):
            a.setflags(write=False)
        object.__setattr__(self, "starts", starts)
        object.__setattr__(self, "ends", ends)
        object.__setattr__(self, "hits", hits)

    def __len__(self) -> int:
        return len(self.hits)

    @property
    def points(self) -> np.ndarray:
        """Hit endpoints, i.e. the point cloud."""
        return self.ends[self.hits]

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray] | None:
        pts = self.points
        if len(pts) == 0:
            return None
        return pts.min(axis=0), pts.max(axis=0)

    def subset(self, mask) -> "RayCloud":
        return RayCloud(self.starts[mask], self.ends[mask], self.hits[mask])

    def __eq__(self, other):
        if not isinstance(other, RayCloud):
            return NotImplemented
        return (np.array_equal(self.starts, other.starts) and np.array_equal(self.ends, other.ends)
                and np.array_equal(self.hits, other.hits))

    @classmethod
    def from_points(cls, points, origin) -> "RayCloud":
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        starts = np.broadcast_to(np.asarray(origin, dtype=float), points.shape)
        return cls(starts, points, np.ones(len(points), dtype=bool))


def _parse_raytext(path) -> RayCloud:
    starts, ends, hits = [], [], []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            tok = line.split()
            if len(tok) != 7:
                raise ParseError(f"expected 7 fields, found {len(tok)}", line_no)
            try:
                vals = [float(t) for t in tok[:6]]
            except ValueError as exc:
                raise ParseError(str(exc), line_no) from None
            if tok[6] not in ("0", "1"):
                raise ParseError(f"hit flag must be 0 or 1, found {tok[6]!r}", line_no)
            if not all(np.isfinite(vals)):
                raise ParseError("non-finite coordinate", line_no)
            hit = tok[6] == "1"
            if hit and vals[:3] == vals[3:]:
                raise ParseError("zero-length hit ray", line_no)
            starts.append(vals[:3])
            ends.append(vals[3:])
            hits.append(hit)
    return RayCloud(np.reshape(starts, (-1, 3)), np.reshape(ends, (-1, 3)), np.asarray(hits, dtype=bool))


def load_raycloud(path, format: str = "raytext", origin=None) -> RayCloud:
    """Load a ray cloud.

    ``raytext`` holds one ``sx sy sz ex ey ez hit`` ray per line. ``ply_points``
    reads vertex positions and uses ``origin`` as the start of every (hit) ray.
    """
    if format == "raytext":
        cloud = _parse_raytext(path)
    elif format == "ply_points":
        if origin is None:
            raise InputError("ply_points input needs a sensor origin")
        pts = read_ply_vertices(path)
        if not np.all(np.isfinite(pts)):
            raise ParseError("non-finite coordinate")
        bad = np.all(pts == np.asarray(origin, dtype=float), axis=1)
        if bad.any():
            raise ParseError("zero-length hit ray", int(np.argmax(bad)) + 1)
        cloud = RayCloud.from_points(pts, origin)
    else:
        raise InputError(f"unknown ray cloud format {format!r}")
    if not cloud.hits.any():
        raise InputError("zero hit points")
    return cloud


def save_raycloud(cloud: RayCloud, path) -> None:
    with open(path, "w") as fh:
        fh.write("# sx sy sz ex ey ez hit\n")
        for s, e, h in zip(cloud.starts, cloud.ends, cloud.hits):
            fh.write(" ".join(repr(float(v)) for v in (*s, *e)) + (" 1\n" if h else " 0\n"))


# -- geometric transforms ----------------------------------------------------

_MIN_PARAM = 1e-12


def _split_rays(cloud: RayCloud, t0: np.ndarray, t1: np.ndarray, keep_inside: bool) -> RayCloud:
    """Cut every ray at parameters ``t0 <= t1`` (clipped to [0, 1]).

    ``keep_inside`` retains the sub-segment between the cuts (box clipping);
    otherwise the parts before ``t0`` and after ``t1`` are retained (sphere
    removal). Segments ending at a cut become non-hit rays.
    """
    s, e, h = cloud.starts, cloud.ends, cloud.hits
    d = e - s
    lo = np.clip(t0, 0.0, 1.0)
    hi = np.clip(t1, 0.0, 1.0)
    crosses = hi - lo > _MIN_PARAM
    pieces = []  # (ray index, ta, tb, hit)
    idx = np.arange(len(h))
    if keep_inside:
        m = crosses
        pieces.append((idx[m], lo[m], hi[m], h[m] & (hi[m] >= 1.0)))
    else:
        m = ~crosses
        pieces.append((idx[m], np.zeros(m.sum()), np.ones(m.sum()), h[m]))
        m_before = crosses & (lo > _MIN_PARAM)
        pieces.append((idx[m_before], np.zeros(m_before.sum()), lo[m_before], np.zeros(m_before.sum(), bool)))
        m_after = crosses & (hi < 1.0 - _MIN_PARAM)
        pieces.append((idx[m_after], hi[m_after], np.ones(m_after.sum()), h[m_after]))
    ray = np.concatenate([p[0] for p in pieces])
    ta = np.concatenate([p[1] for p in pieces])
    tb = np.concatenate([p[2] for p in pieces])
    hit = np.concatenate([p[3] for p in pieces])
    order = np.lexsort((ta, ray))
    ray, ta, tb, hit = ray[order], ta[order], tb[order], hit[order]
    starts = np.where((ta == 0.0)[:, None], s[ray], s[ray] + ta[:, None] * d[ray])
    ends = np.where((tb == 1.0)[:, None], e[ray], s[ray] + tb[:, None] * d[ray])
    return RayCloud(starts, ends, hit)


def occlude_sphere(cloud: RayCloud, center, diameter: float) -> RayCloud:
    """Remove every point and ray section inside a sphere."""
    if diameter <= 0:
        raise InputError("sphere diameter must be positive")
    c = np.asarray(center, dtype=float)
    r = 0.5 * diameter
    s = cloud.starts
    d = cloud.ends - s
    a = np.einsum("ij,ij->i", d, d)
    f = s - c
    b = np.einsum("ij,ij->i", f, d)
    cc = np.einsum("ij,ij->i", f, f) - r * r
    disc = b * b - a * cc
    safe_a = np.where(a > 0, a, 1.0)
    root = np.sqrt(np.maximum(disc, 0.0))
    t0 = np.where((disc > 0) & (a > 0), (-b - root) / safe_a, np.inf)
    t1 = np.where((disc > 0) & (a > 0), (-b + root) / safe_a, np.inf)
    degenerate_inside = (a == 0) & (cc < 0)
    t0 = np.where(degenerate_inside, -1.0, t0)
    t1 = np.where(degenerate_inside, 2.0, t1)
    return _split_rays(cloud, t0, t1, keep_inside=False)


def crop_box(cloud: RayCloud, box_min, box_max) -> RayCloud:
    """Clip every ray to a closed axis-aligned box."""
    bmin = np.asarray(box_min, dtype=float)
    bmax = np.asarray(box_max, dtype=float)
    if np.any(bmax <= bmin):
        raise InputError("degenerate crop box")
    s = cloud.starts
    d = cloud.ends - s
    t0 = np.zeros(len(s))
    t1 = np.ones(len(s))
    with np.errstate(divide="ignore", invalid="ignore"):
        for ax in range(3):
            moving = d[:, ax] != 0
            ta = (bmin[ax] - s[:, ax]) / d[:, ax]
            tb = (bmax[ax] - s[:, ax]) / d[:, ax]
            near = np.where(moving, np.minimum(ta, tb), -np.inf)
            far = np.where(moving, np.maximum(ta, tb), np.inf)
            outside = ~moving & ((s[:, ax] < bmin[ax]) | (s[:, ax] > bmax[ax]))
            t0 = np.maximum(t0, near)
            t1 = np.minimum(t1, far)
            t1 = np.where(outside, -np.inf, t1)
    inside_end = np.all((cloud.ends >= bmin) & (cloud.ends <= bmax), axis=1)
    # an end on the box boundary must survive even if t1 rounds below 1
    t1 = np.where(inside_end & (t1 >= t0), 1.0, t1)
    ok = t1 - t0 > _MIN_PARAM
    out = _split_rays(cloud.subset(ok), t0[ok], t1[ok], keep_inside=True)
    # snap cut points onto the box so cropping is idempotent under round-off
    return RayCloud(np.clip(out.starts, bmin, bmax), np.clip(out.ends, bmin, bmax), out.hits)


def subsample(cloud: RayCloud, cell: float) -> RayCloud:
    """Keep the first hit ray per cubic cell of width ``cell``; non-hit rays are kept."""
    if cell <= 0:
        raise InputError("subsample cell must be positive")
    keep = ~cloud.hits.copy()
    hit_idx = np.flatnonzero(cloud.hits)
    if len(hit_idx):
        pts = cloud.ends[hit_idx]
        keys = np.floor((pts - pts.min(axis=0)) / cell).astype(np.int64)
        _, first = np.unique(keys, axis=0, return_index=True)
        keep[hit_idx[np.sort(first)]] = True
    return cloud.subset(keep)
