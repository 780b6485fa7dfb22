"""Reconstruction scoring and study harnesses.

Surface Error assigns every point to its nearest cylinder, averages the
point-to-surface distance per cylinder and combines the per-cylinder means
weighted by lateral area, so dense patches of points carry no extra weight.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import InputError, TopoTreeError
from .ground import build_ground
from .pipeline import PipelineConfig, run_pipeline, tree_points
from .raycloud import occlude_sphere

log = logging.getLogger(__name__)


@dataclass
class Cylinders:
    base: np.ndarray    # (n, 3)
    axis: np.ndarray    # (n, 3) unit vectors
    length: np.ndarray  # (n,)
    radius: np.ndarray  # (n,)

    def __len__(self) -> int:
        return len(self.length)

    @property
    def area(self) -> np.ndarray:
        return 2.0 * np.pi * self.radius * self.length

    @classmethod
    def from_segments(cls, a, b, radius) -> "Cylinders":
        a = np.asarray(a, dtype=float).reshape(-1, 3)
        b = np.asarray(b, dtype=float).reshape(-1, 3)
        d = b - a
        L = np.sqrt(np.einsum("ij,ij->i", d, d))
        keep = L > 0
        return cls(a[keep], d[keep] / L[keep, None], L[keep], np.asarray(radius, dtype=float).reshape(-1)[keep])

    @classmethod
    def from_bsg(cls, graph) -> "Cylinders":
        """One cylinder per parent-child edge with the child's radius; zero-length edges are skipped."""
        e = graph.edges()
        return cls.from_segments(graph.positions[e[:, 0]], graph.positions[e[:, 1]], graph.radii[e[:, 1]])


def cylinder_distance(points, cyl: Cylinders) -> np.ndarray:
    """Unsigned distance from each point to each cylinder's lateral surface, shape ``(m, n)``.

    Within the axial extent this is ``|rho - r|``; beyond it the distance to
    the nearer rim circle.
    """
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    rel = p[:, None, :] - cyl.base[None]
    t = np.einsum("mnk,nk->mn", rel, cyl.axis)
    radial = rel - t[..., None] * cyl.axis[None]
    rho = np.sqrt(np.einsum("mnk,mnk->mn", radial, radial))
    dr = rho - cyl.radius[None]
    t_out = np.maximum(np.maximum(-t, t - cyl.length[None]), 0.0)
    return np.where(t_out > 0, np.sqrt(t_out * t_out + dr * dr), np.abs(dr))


def assign_points(points, cyl: Cylinders, chunk: int = 4096):
    """Nearest cylinder (lowest index on ties) and its distance for every point."""
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    idx = np.empty(len(p), dtype=np.int64)
    dist = np.empty(len(p))
    step = max(1, chunk * 64 // max(len(cyl), 1))
    for s in range(0, len(p), step):
        d = cylinder_distance(p[s:s + step], cyl)
        j = np.argmin(d, axis=1)
        idx[s:s + step] = j
        dist[s:s + step] = d[np.arange(len(j)), j]
    return idx, dist


def exact_sum(values) -> Fraction:
    """Exact rational sum of finite doubles, split into 26-bit mantissa halves per exponent."""
    v = np.asarray(values, dtype=float).ravel()
    m, e = np.frexp(v)
    M = (m * 2.0 ** 53).astype(np.int64)
    E = e.astype(np.int64) - 53
    total = Fraction(0)
    for ex in np.unique(E):
        sel = M[E == ex]
        hi = int(np.sum(sel >> 26))
        lo = int(np.sum(sel & ((1 << 26) - 1)))
        total += Fraction((hi << 26) + lo) * Fraction(2) ** int(ex)
    return total


@dataclass
class CylinderScore:
    index: int
    mean_distance: float
    area: float
    count: int


@dataclass
class SurfaceErrorReport:
    se: float
    per_cylinder: list[CylinderScore] = field(default_factory=list)
    unmatched_points: int = 0


def surface_error(graph, points, weighting: str = "area", max_distance: float | None = None) -> SurfaceErrorReport:
    """Surface Error of a branch structure graph against observed points.

    ``weighting="area"`` gives the area-weighted mean of per-cylinder mean
    distances. ``weighting="count"`` weights each cylinder by its number of
    matched points instead, which is provided for comparison. Points farther
    than ``max_distance`` from every cylinder, or non-finite, count as
    unmatched. Means and the weighted average are computed exactly and rounded
    once, so duplicating points any number of times leaves the result
    bit-identical.
    """
    if weighting not in ("area", "count"):
        raise InputError(f"unknown weighting {weighting!r}")
    cyl = graph if isinstance(graph, Cylinders) else Cylinders.from_bsg(graph)
    if len(cyl) == 0:
        raise InputError("no cylinders to score against")
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    finite = np.all(np.isfinite(p), axis=1)
    idx, dist = assign_points(p[finite], cyl)
    ok = np.ones(len(idx), dtype=bool) if max_distance is None else dist <= max_distance
    idx, dist = idx[ok], dist[ok]
    unmatched = int(len(p) - len(idx))
    if len(idx) == 0:
        raise InputError("no points matched any cylinder")
    order = np.argsort(idx, kind="stable")
    idx, dist = idx[order], dist[order]
    cuts = np.flatnonzero(np.diff(idx)) + 1
    area = cyl.area
    scores, means = [], []
    for group_idx, group_d in zip(np.split(idx, cuts), np.split(dist, cuts)):
        i = int(group_idx[0])
        mean = exact_sum(group_d) / len(group_d)
        scores.append(CylinderScore(i, float(mean), float(area[i]), len(group_d)))
        means.append(mean)
    wts = [Fraction(s.area) if weighting == "area" else Fraction(s.count) for s in scores]
    se = float(sum(w * m for w, m in zip(wts, means)) / sum(wts))
    return SurfaceErrorReport(se, scores, unmatched)


def trunk_diameters(graph) -> np.ndarray:
    """Per tree: twice the radius of the root's lowest-index child (the root itself if childless)."""
    kids = graph.children()
    out = []
    for r in graph.roots:
        node = kids[r][0] if kids[r] else r
        out.append(2.0 * graph.radii[node])
    return np.asarray(out, dtype=float)


def count_principal_stems(graph, fraction: float = 0.3) -> int:
    if not 0 < fraction <= 1:
        raise InputError("fraction must lie in (0, 1]")
    if len(graph) == 0:
        return 0
    d = trunk_diameters(graph)
    return int(np.count_nonzero(d > fraction * d.max()))


# -- study harnesses -------------------------------------------------------------

@dataclass
class StudyRow:
    key: float
    se: float | None
    error: str | None = None
    n_nodes: int = 0
    w: float | None = None


@dataclass
class StudyTable:
    header: tuple[str, str]
    rows: list[StudyRow]
    fit: tuple[float, float] | None = None  # slope, intercept

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(self.header)
            for r in self.rows:
                wr.writerow([repr(float(r.key)), "" if r.se is None else repr(float(r.se))])

    def summary(self) -> str:
        lines = [f"{self.header[0]:>12} {self.header[1]:>12}"]
        for r in self.rows:
            se = "failed: " + str(r.error) if r.se is None else f"{r.se:12.6f}"
            lines.append(f"{r.key:12.6f} {se}")
        if self.fit is not None:
            lines.append(f"least-squares fit: se = {self.fit[0]:.4f} * w + {self.fit[1]:.4f}")
        return "\n".join(lines)


def tree_heights(cloud, centers, ground=None, g: float = 1.0) -> np.ndarray:
    """Height of each tree: highest point above ground among points horizontally nearest its center."""
    centers = np.asarray(centers, dtype=float).reshape(-1, 3)
    if len(centers) == 0:
        raise InputError("no tree centers given")
    ground = ground or build_ground(cloud, g)
    pts = cloud.points
    above = pts[:, 2] - ground.heights_extended(pts[:, :2])
    d2 = np.sum((pts[:, None, :2] - centers[None, :, :2]) ** 2, axis=2)
    owner = np.argmin(d2, axis=1)
    h = np.zeros(len(centers))
    for i in range(len(centers)):
        mine = above[owner == i]
        if len(mine) == 0:
            raise InputError(f"tree center {i} owns no points")
        h[i] = mine.max()
    return h


def occlusion_study(cloud, centers, fractions, config: PipelineConfig | None = None,
                    reference_points=None) -> StudyTable:
    """Occlude a sphere of diameter ``fraction * height`` at every tree center and rescore.

    Scoring always uses the unoccluded cloud: by default its points at least
    the exclusion height above ground.
    """
    config = config or PipelineConfig()
    centers = np.asarray(centers, dtype=float).reshape(-1, 3)
    ground = build_ground(cloud, config.g)
    heights = tree_heights(cloud, centers, ground)
    ref = tree_points(cloud, ground, config.exclusion_height) if reference_points is None else reference_points
    rows = []
    for f in fractions:
        try:
            occluded = cloud
            if f > 0:
                for c, h in zip(centers, heights):
                    occluded = occlude_sphere(occluded, c, f * h)
            res = run_pipeline(occluded, config)
            rep = surface_error(res.bsg, ref)
            rows.append(StudyRow(float(f), rep.se, None, len(res.bsg), res.grid.w))
        except (TopoTreeError, ValueError, ArithmeticError) as exc:
            log.warning("occlusion fraction %g failed: %s", f, exc)
            rows.append(StudyRow(float(f), None, f"{type(exc).__name__}: {exc}"))
    return StudyTable(("fraction", "se_m"), rows)


def fit_line(x, y) -> tuple[float, float]:
    A = np.column_stack([np.asarray(x, dtype=float), np.ones(len(x))])
    (slope, icpt), *_ = np.linalg.lstsq(A, np.asarray(y, dtype=float), rcond=None)
    return float(slope), float(icpt)


def voxel_sweep(cloud, voxel_counts, config: PipelineConfig | None = None, reference_points=None) -> StudyTable:
    """Run the pipeline at each target voxel count and score against the cloud."""
    config = config or PipelineConfig()
    if any(n <= 0 for n in voxel_counts):
        raise InputError("voxel counts must be positive")
    ground = build_ground(cloud, config.g)
    ref = tree_points(cloud, ground, config.exclusion_height) if reference_points is None else reference_points
    rows = []
    for n in voxel_counts:
        try:
            res = run_pipeline(cloud, config.replace(target_N=int(n), w=None))
            rep = surface_error(res.bsg, ref)
            rows.append(StudyRow(res.grid.w, rep.se, None, len(res.bsg), res.grid.w))
        except (TopoTreeError, ValueError, ArithmeticError) as exc:
            log.warning("voxel count %d failed: %s", n, exc)
            rows.append(StudyRow(float("nan"), None, f"{type(exc).__name__}: {exc}"))
    good = [r for r in rows if r.se is not None]
    fit = fit_line([r.key for r in good], [r.se for r in good]) if len(good) >= 2 else None
    return StudyTable(("w_m", "se_m"), rows, fit)
