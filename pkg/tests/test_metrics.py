from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from topotree.bsg import BranchStructureGraph
from topotree.errors import InputError
from topotree.metrics import (Cylinders, StudyRow, StudyTable, assign_points, count_principal_stems,
                              cylinder_distance, exact_sum, fit_line, surface_error, tree_heights, trunk_diameters)
from topotree.raycloud import RayCloud


def z_cylinder(z0=0.0, z1=2.0, r=0.25, xy=(0.0, 0.0)):
    return Cylinders.from_segments([[*xy, z0]], [[*xy, z1]], [r])


def ring_points(r, zs, xy=(0.0, 0.0), delta=0.0):
    """Points at radial distance r + delta in the four axis directions, so radii are exact."""
    out = []
    for z in zs:
        for dx, dy in ((1, 0), (0, 1), (-1, 0), (0, -1)):
            out.append([xy[0] + dx * (r + delta), xy[1] + dy * (r + delta), z])
    return np.array(out)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_subnormal=True), max_size=80))
def test_exact_sum_matches_fractions(values):
    assert exact_sum(values) == sum((Fraction(v) for v in values), Fraction(0))


def test_distance_examples():
    cyl = z_cylinder()
    d = cylinder_distance([[0.25, 0, 1.0], [0.75, 0, 1.0], [0, 0, 1.0], [0.25, 0, 2.3], [0.65, 0, -0.3]], cyl)
    assert np.allclose(d[:, 0], [0.0, 0.5, 0.25, 0.3, 0.5], atol=1e-15)


def test_zero_on_surface():
    cyl = z_cylinder()
    pts = ring_points(0.25, np.linspace(0.1, 1.9, 7))
    assert surface_error(cyl, pts).se == 0.0
    theta = np.linspace(0, 2 * np.pi, 37)
    pts = np.column_stack([0.25 * np.cos(theta), 0.25 * np.sin(theta), np.linspace(0, 2, 37)])
    assert surface_error(cyl, pts).se <= 1e-15
    bsg = BranchStructureGraph(np.array([[0.0, 0, 0], [0, 0, 2]]), np.array([-1, 0]), np.array([0.3, 0.25]))
    assert surface_error(bsg, ring_points(0.25, [0.5, 1.5])).se == 0.0


def test_offset_example_and_report():
    rep = surface_error(z_cylinder(), ring_points(0.25, [0.5, 1.0, 1.5], delta=0.5))
    assert rep.se == 0.5
    assert len(rep.per_cylinder) == 1 and rep.per_cylinder[0].count == 12
    assert rep.per_cylinder[0].area == pytest.approx(2 * np.pi * 0.25 * 2)
    far = np.vstack([ring_points(0.25, [1.0]), [[10, 0, 1]], [[np.nan, 0, 0]]])
    rep = surface_error(z_cylinder(), far, max_distance=1.0)
    assert rep.unmatched_points == 2 and rep.se == 0.0


def test_errors():
    with pytest.raises(InputError):
        surface_error(BranchStructureGraph.empty(), [[0, 0, 0]])
    with pytest.raises(InputError):
        surface_error(z_cylinder(), [[0, 0, 0]], weighting="median")
    with pytest.raises(InputError):
        surface_error(z_cylinder(), [[50, 0, 0]], max_distance=1.0)


def two_cylinders():
    return Cylinders.from_segments([[0, 0, 0], [3, 0, 0]], [[0, 0, 2], [3, 0, 1]], [0.25, 0.125])


def noisy_points(rng, n):
    a = rng.standard_normal((n, 3)) * 0.2 + [0, 0, 1]
    b = rng.standard_normal((n, 3)) * 0.2 + [3, 0, 0.5]
    return np.vstack([a, b])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 60), st.integers(2, 5), st.sampled_from(["area", "count"]))
def test_duplication_invariance_is_exact(seed, n, copies, weighting):
    rng = np.random.default_rng(seed)
    pts = noisy_points(rng, n)
    base = surface_error(two_cylinders(), pts, weighting).se
    dup = surface_error(two_cylinders(), np.tile(pts, (copies, 1)), weighting).se
    assert dup == base
    shuffled = surface_error(two_cylinders(), pts[rng.permutation(len(pts))], weighting).se
    assert shuffled == base


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4), st.integers(1, 6))
def test_coaxial_subdivision_is_exact(seed, k, per_piece):
    rng = np.random.default_rng(seed)
    L, r, pieces = 2.0, 0.25, 2 ** k
    step = L / pieces
    # the same sample pattern repeated in every piece, away from the cut planes
    offsets = (np.arange(per_piece) + 0.5) / per_piece * step
    deltas = rng.choice([0.0, 0.0625, 0.125, 0.5], size=per_piece)
    pts = np.vstack([ring_points(r, [i * step + o], delta=dl) for i in range(pieces) for o, dl in zip(offsets, deltas)])
    whole = surface_error(z_cylinder(0, L, r), pts).se
    z = np.arange(pieces + 1) * step
    split = Cylinders.from_segments(np.column_stack([np.zeros((pieces, 2)), z[:-1]]),
                                    np.column_stack([np.zeros((pieces, 2)), z[1:]]), np.full(pieces, r))
    assert surface_error(split, pts).se == whole


def test_count_weighting_shifts_under_half_duplication():
    rng = np.random.default_rng(1)
    pts = noisy_points(rng, 40)
    half = pts[:40]  # the points around the first cylinder
    grown = np.vstack([pts, half, half])
    cyl = two_cylinders()
    idx, _ = assign_points(half, cyl)
    assert np.all(idx == 0)
    assert surface_error(cyl, grown, "area").se == surface_error(cyl, pts, "area").se
    a, b = surface_error(cyl, pts, "count").se, surface_error(cyl, grown, "count").se
    assert abs(a - b) > 1e-3 * a


def test_assign_points_breaks_ties_to_lowest_index():
    cyl = Cylinders.from_segments([[0, 0, 0], [0, 0, 0]], [[0, 0, 1], [0, 0, 1]], [0.5, 0.5])
    idx, d = assign_points([[0.5, 0, 0.5], [2, 0, 0.5]], cyl, chunk=1)
    assert idx.tolist() == [0, 0] and d.tolist() == [0.0, 1.5]


def forest_graph(trunk_radii):
    """One root per tree at x = 10 i with a single child carrying the trunk radius."""
    pos, par, rad = [], [], []
    for i, r in enumerate(trunk_radii):
        pos += [[10.0 * i, 0, 0], [10.0 * i, 0, 1]]
        par += [-1, 2 * i]
        rad += [2 * r, r]
    return BranchStructureGraph(np.array(pos), np.array(par), np.array(rad))


def test_principal_stems():
    g = forest_graph([0.2, 0.1, 0.05, 0.061])
    assert np.allclose(trunk_diameters(g), [0.4, 0.2, 0.1, 0.122])
    assert count_principal_stems(g) == 3
    assert count_principal_stems(g, 1.0) == 0
    assert count_principal_stems(BranchStructureGraph.empty()) == 0
    lone = BranchStructureGraph(np.zeros((1, 3)), np.array([-1]), np.array([0.3]))
    assert trunk_diameters(lone).tolist() == [0.6]
    with pytest.raises(InputError):
        count_principal_stems(g, 0.0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.01, 1.0), min_size=1, max_size=8), st.sampled_from([0.125, 0.5, 2.0, 8.0]))
def test_principal_stems_scale_invariant(radii, scale):
    a = count_principal_stems(forest_graph(radii))
    assert a == count_principal_stems(forest_graph([scale * r for r in radii]))
    assert 1 <= a <= len(radii)


def test_tree_heights_and_study_table(tmp_path):
    xs = np.linspace(-3, 8, 12)
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    ground = np.column_stack([X.ravel(), Y.ravel(), np.zeros(X.size)])
    trees = np.array([[0, 0, 3.0], [0, 0, 1.0], [5, 5, 2.0]])
    cloud = RayCloud.from_points(np.vstack([ground, trees]), [0, 0, 20])
    assert np.allclose(tree_heights(cloud, [[0, 0, 1], [5, 5, 1]]), [3.0, 2.0])
    with pytest.raises(InputError):
        tree_heights(cloud, np.zeros((0, 3)))
    assert fit_line([1, 2, 3], [3, 5, 7]) == pytest.approx((2.0, 1.0))
    table = StudyTable(("w_m", "se_m"), [StudyRow(0.1, 0.05), StudyRow(0.2, None, "boom")], (0.5, 0.0))
    table.write_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "w_m,se_m" and len(lines) == 3
    assert "failed" in table.summary()
