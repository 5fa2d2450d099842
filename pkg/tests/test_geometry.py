import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from localtb.geometry import (Cube, CubeTree, DyadicGrid, Goodness, GoodnessParams, WhitneyRegion, boundary_distance,
                              box_distance, classify_goodness, grid_exponent, long_distance, reference_grid,
                              sample_grid)

BASE = Cube((-0.5,), 1.0)
H = 1 / 64


def brute_goodness(R: Cube, grid: DyadicGrid, params: GoodnessParams) -> Goodness:
    """Enumerate every grid cube large enough to constrain R."""
    for depth in range(grid.max_depth + 1):
        s = grid.side(depth)
        if s < 2 ** params.r_param * R.side:
            continue
        for P in grid.cubes_at(depth):
            if boundary_distance(R, P) <= params.threshold(R.side, s):
                return Goodness.BAD
    return Goodness.GOOD


def test_grid_root_for_unit_cube():
    g = sample_grid(BASE, seed=3, pitch=H)
    assert g.N == 3
    assert g.root.side == 16
    w = np.asarray(g.offset)
    assert np.all(w >= -4) and np.all(w < 4)
    assert np.allclose(g.root.lower, BASE.center + w - 8)


def test_sample_grid_deterministic():
    a = sample_grid(BASE, seed=11, pitch=H)
    b = sample_grid(BASE, seed=11, pitch=H)
    assert a == b
    assert a.to_json() == b.to_json()
    assert DyadicGrid.from_json(a.to_json()) == a


def test_reference_grid_contains_base_in_half_root():
    g = reference_grid(BASE, pitch=H)
    half = g.root.dilate(0.5)
    assert half.contains_cube(BASE)


def test_grid_exponent_range():
    for side in (0.25, 1.0, 3.0, 7.9):
        N = grid_exponent(side)
        assert 2 ** (N - 3) <= side < 2 ** (N - 2)


@pytest.mark.parametrize("P,R,expected", [
    (Cube((0.0,), 1.0), Cube((0.0,), 1.0), 2.0),
    (Cube((0.0,), 1.0), Cube((1.0,), 1.0), 2.0),
    (Cube((0.0,), 1.0), Cube((10.0,), 1.0), 11.0),
])
def test_long_distance_examples(P, R, expected):
    assert long_distance(P, R) == pytest.approx(expected)


def test_box_distance_2d_diagonal():
    assert box_distance(Cube((0.0, 0.0), 1.0), Cube((4.0, 5.0), 1.0)) == pytest.approx(5.0)


def test_goodness_vacuous_when_no_large_cube():
    g = reference_grid(BASE, pitch=H)
    R = Cube((0.0,), 1.0)
    assert classify_goodness(R, g, GoodnessParams(5, 0.25)) is Goodness.GOOD


def test_goodness_abutting_boundary_is_bad():
    g = reference_grid(BASE, pitch=H)
    # the root is [-8, 8); R touches its left edge
    R = Cube((-8.0,), 0.25)
    assert classify_goodness(R, g, GoodnessParams(4, 0.25)) is Goodness.BAD


def test_goodness_centered_example():
    # l(R)=1, l(P)=16 with R centred in P: d(R, dP) = 7.5 < 16^(3/4) = 8
    g = reference_grid(BASE, pitch=H)
    R = Cube((-0.5,), 1.0)
    P = g.root
    params = GoodnessParams.from_exponents(1.0, 1.0, 4)
    assert params.gamma == 0.25
    assert boundary_distance(R, P) == pytest.approx(7.5)
    assert params.threshold(1.0, 16.0) == pytest.approx(8.0)
    assert classify_goodness(R, g, params) is Goodness.BAD
    assert brute_goodness(R, g, params) is Goodness.BAD


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2 ** 16), k=st.integers(-32, 31), level=st.integers(2, 5), r=st.integers(1, 6))
def test_goodness_matches_brute_force(seed, k, level, r):
    g = sample_grid(BASE, seed=seed, pitch=H, max_depth=8)
    side = 2.0 ** -level
    R = Cube((k * H,), side)
    params = GoodnessParams(r, 0.25)
    assert classify_goodness(R, g, params) is brute_goodness(R, g, params)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2 ** 16), k=st.integers(-32, 31), level=st.integers(1, 5), r=st.integers(1, 8))
def test_goodness_monotone_in_r(seed, k, level, r):
    g = sample_grid(BASE, seed=seed, pitch=H)
    R = Cube((k * H,), 2.0 ** -level)
    if classify_goodness(R, g, GoodnessParams(r, 0.25)) is Goodness.GOOD:
        assert classify_goodness(R, g, GoodnessParams(r + 1, 0.25)) is Goodness.GOOD


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2 ** 16), k=st.integers(-32, 31), shift=st.integers(-16, 16), r=st.integers(1, 6))
def test_goodness_translation_covariant(seed, k, shift, r):
    g = sample_grid(BASE, seed=seed, pitch=H)
    v = shift * H
    moved = DyadicGrid(g.base, g.pitch, (g.offset[0] + v,), g.max_depth, g.seed)
    R = Cube((k * H,), 1 / 8)
    params = GoodnessParams(r, 0.25)
    assert classify_goodness(R, g, params) is classify_goodness(R.translate((v,)), moved, params)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 16), depth=st.integers(0, 8))
def test_levels_partition_the_lattice(seed, depth):
    Q = Cube((-0.5, -0.5), 1.0)
    h = 1 / 16
    g = sample_grid(Q, seed=seed, pitch=h)
    coords = np.stack(np.meshgrid(np.arange(-8, 8), np.arange(-8, 8), indexing="ij"), -1).reshape(-1, 2)
    idx = g.cell_index(coords, depth)
    assert np.all(idx >= 0) and np.all(idx < 2 ** depth)
    # each cell's centre lies inside exactly the cube its index names
    centers = (coords + 0.5) * h
    for c, i in zip(centers[::17], idx[::17]):
        assert g.cube(depth, i).contains(c)
        others = [g.cube(depth, i + np.array(e)) for e in ((1, 0), (0, 1), (-1, 0), (0, -1))]
        assert not any(o.contains(c) for o in others)


def test_cube_tree_children_tile_parent():
    g = sample_grid(BASE, seed=5, pitch=H)
    coords = np.arange(-32, 32)[:, None]
    tree = CubeTree(g, coords)
    assert tree.resolved
    for node in range(tree.n_nodes):
        kids = tree.children(node)
        if len(kids):
            assert sum(len(tree.cells(k)) for k in kids) == len(tree.cells(node))
            for k in kids:
                assert tree.cube(node).contains_cube(tree.cube(k))


def test_whitney_regions_tile_time_axis():
    g = reference_grid(BASE, pitch=H)
    x = np.array([0.3])
    bands = []
    for depth in range(g.max_depth + 1):
        idx = g.cell_index(np.floor(x / H).astype(np.int64)[None, :], depth)[0]
        bands.append(WhitneyRegion(g.cube(depth, idx)).time_band)
    bands.sort()
    for (a0, a1), (b0, b1) in zip(bands, bands[1:]):
        assert a1 == pytest.approx(b0)
    assert bands[-1][1] == g.root.side
    ts = np.exp(np.linspace(math.log(bands[0][0]), math.log(g.root.side) - 1e-9, 200))
    for t in ts:
        hits = sum(lo <= t < hi for lo, hi in bands)
        assert hits == 1


def test_misaligned_grid_rejected():
    with pytest.raises(ValueError):
        DyadicGrid(BASE, H, (H / 3,), 4)
    with pytest.raises(ValueError):
        DyadicGrid(BASE, H, (0.0,), 40)
