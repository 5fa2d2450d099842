import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from localtb.geometry import Cube, CubeTree, GoodnessParams, reference_grid, sample_grid
from localtb.harness import generate_scenario
from localtb.martingale import (b_coefficient, b_coefficient_direct, expand, generation_chains, quasi_orthogonality,
                                reconstruct, transit_cubes)
from localtb.measure import BoundedDensity, CellMask, CellMeasure, polar_decompose

Q1 = Cube((-0.5,), 1.0)


def two_cells():
    sigma = CellMeasure(1 / 64, [[-1], [0]], [0.5, 0.5], Q1)
    g = reference_grid(Q1, pitch=1 / 64)
    tr = transit_cubes(g, sigma, CellMask.empty(1 / 64, 1))
    one = BoundedDensity.on(sigma, 1.0)
    f = BoundedDensity.on(sigma, [0.0, 2.0])
    return sigma, g, tr, one, f


def test_two_cell_haar_example():
    sigma, g, tr, one, f = two_cells()
    exp = expand(f, one, sigma, g, tr)
    assert np.allclose(exp.top, [1.0, 1.0])
    # the root [-8, 8) is the first cube separating the cells
    assert np.allclose(exp.coefficients[0], [-1.0, 1.0])
    assert np.all(exp.coefficients[1:] == 0)
    energy = math.fsum(exp.delta_norms_sq()) + exp.top_norm_sq()
    assert energy == pytest.approx(2.0)
    assert f.l2_norm_sq(sigma) == pytest.approx(2.0)
    assert np.allclose(reconstruct(exp), [0.0, 2.0])


def test_f_equal_b_has_no_differences():
    sc = generate_scenario("lebesgue-1d", {"h": 1 / 64})
    sigma, b = polar_decompose(sc.nu)
    g = sample_grid(sc.Q, 1, pitch=sc.pitch)
    tr = transit_cubes(g, sigma, CellMask.empty(sc.pitch, 1))
    exp = expand(b, b, sigma, g, tr)
    assert np.max(np.abs(exp.coefficients)) <= 1e-12
    assert np.allclose(exp.top, b.values)
    assert np.allclose(reconstruct(exp), b.values)


def test_transit_sets():
    sigma, g, tr, _, _ = two_cells()
    assert tr.is_transit.all()
    assert tr.root_is_transit
    excl = CellMask(1 / 64, np.array([[-1]]))
    tr2 = transit_cubes(g, sigma, excl)
    assert tr2.root_is_transit
    leaf = tr2.tree.cell_node[-1][0]
    assert not tr2.is_transit[leaf]
    assert tr2.tree.cube(leaf) not in tr2


def _scenario_expansion(kind="lebesgue-1d", h=1 / 64, seed=2):
    sc = generate_scenario(kind, {"h": h})
    sigma, b = polar_decompose(sc.nu)
    g = sample_grid(sc.Q, seed, pitch=sc.pitch)
    tr = transit_cubes(g, sigma, CellMask.empty(sc.pitch, sc.n))
    return sc, sigma, b, g, tr


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 20))
def test_reconstruction_is_exact(seed):
    sc, sigma, b, g, tr = _scenario_expansion(seed=seed)
    rng = np.random.default_rng(seed)
    f = BoundedDensity.on(sigma, rng.normal(size=len(sigma)) + 1j * rng.normal(size=len(sigma)))
    exp = expand(f, b, sigma, g, tr)
    rec = reconstruct(exp)
    assert np.max(np.abs(rec - f.values)) <= 1e-10 * np.max(np.abs(f.values))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 20))
def test_differences_have_mean_zero_and_local_support(seed):
    sc, sigma, b, g, tr = _scenario_expansion("cantor-1d", 1 / 256, seed)
    rng = np.random.default_rng(seed)
    f = BoundedDensity.on(sigma, rng.normal(size=len(sigma)))
    exp = expand(f, b, sigma, g, tr)
    t = exp.tree
    fnorm = math.sqrt(f.l2_norm_sq(sigma))
    ints = exp.delta_integrals()
    for node in range(t.n_nodes):
        kids = t.children(node)
        if len(kids) and tr.is_transit[kids].all():
            assert abs(ints[node]) <= 1e-10 * fnorm
        d = exp.delta(node, include_top=False)
        off = t.cell_node[t.node_depth[node]] != node
        assert np.all(d[off] == 0)


@pytest.mark.parametrize("kind,h", [("lebesgue-1d", 1 / 256), ("cantor-1d", 1 / 256), ("spike-mix", 1 / 512)])
def test_quasi_orthogonality_ceiling(kind, h):
    sc, sigma, b, g, tr = _scenario_expansion(kind, h)
    q = quasi_orthogonality(b, sigma, tr)
    limit = 16 * sc.cfg.C_b ** 2 / sc.cfg.c_acc ** 2
    assert q["probe_max"] <= q["operator_norm_sq"] * (1 + 1e-6) + q["gap"]
    assert q["operator_norm_sq"] <= limit


def test_quasi_orthogonality_is_one_for_haar():
    sigma = CellMeasure(1 / 64, np.arange(-32, 32)[:, None], np.full(64, 1 / 64), Q1)
    g = sample_grid(Q1, 0, pitch=1 / 64)
    tr = transit_cubes(g, sigma, CellMask.empty(1 / 64, 1))
    q = quasi_orthogonality(BoundedDensity.on(sigma, 1.0), sigma, tr)
    assert q["operator_norm_sq"] == pytest.approx(1.0, abs=1e-6)
    assert q["probe_max"] == pytest.approx(1.0, abs=1e-12)


def _chains(sc, sigma, b, g, tr):
    grid0 = reference_grid(sc.Q, pitch=sc.pitch)
    excl = CellMask.empty(sc.pitch, sc.n)
    tree0 = CubeTree(grid0, sigma.coords, min_depth=tr.tree.depth)
    for r in range(4, tr.tree.depth):
        params = GoodnessParams.from_exponents(sc.m, sc.kernel.alpha, r)
        ch = generation_chains(expand(b, b, sigma, g, tr), grid0, params, excl, tree0)
        if ch:
            return params, ch
    return None, []


def test_chains_are_transit_and_nested():
    sc, sigma, b, g, tr = _scenario_expansion("lebesgue-1d", 1 / 256, 0)
    params, chains = _chains(sc, sigma, b, g, tr)
    assert chains
    t = tr.tree
    for ch in chains:
        cubes = [t.cube(ch.nodes[k]) for k in sorted(ch.nodes)]
        assert all(tr.is_transit[ch.nodes[k]] for k in ch.nodes)
        for small, big in zip(cubes, cubes[1:]):
            assert big.contains_cube(small)
            assert big.side == 2 * small.side
        assert cubes[0].contains_cube(ch.R)
        assert cubes[0].side == 2 ** params.r_param * ch.R.side


def test_b_coefficient_forms_agree_and_obey_bound():
    sc, sigma, b, g, tr = _scenario_expansion("lebesgue-1d", 1 / 256, 0)
    _, chains = _chains(sc, sigma, b, g, tr)
    rng = np.random.default_rng(0)
    f = BoundedDensity.on(sigma, rng.normal(size=len(sigma)))
    exp = expand(f, b, sigma, g, tr)
    s = sigma.abs_weights
    t = exp.tree
    checked = 0
    for ch in chains:
        for k in sorted(ch.nodes)[1:]:
            B = b_coefficient(ch, k, exp, b, sigma)
            assert B == pytest.approx(b_coefficient_direct(ch, k, exp, b, sigma), rel=1e-9, abs=1e-12)
            lo, hi = ch.nodes[k - 1], ch.nodes[k]
            s_lo = math.fsum(s[t.cell_node[t.node_depth[lo]] == lo])
            d = exp.delta(hi, include_top=(k == ch.k_top))
            norm = math.sqrt(math.fsum(np.abs(d) ** 2 * s))
            assert abs(B) * s_lo <= math.sqrt(s_lo) * norm / sc.cfg.c_acc * (1 + 1e-9)
            checked += 1
    assert checked


def test_b_coefficient_trivial_density():
    sigma = CellMeasure(1 / 256, np.arange(-128, 128)[:, None], np.full(256, 1 / 256), Q1)
    one = BoundedDensity.on(sigma, 1.0)
    sc = generate_scenario("lebesgue-1d", {"h": 1 / 256, "pert": 0.0})
    g = sample_grid(Q1, 0, pitch=1 / 256)
    tr = transit_cubes(g, sigma, CellMask.empty(1 / 256, 1))
    _, chains = _chains(sc, sigma, one, g, tr)
    rng = np.random.default_rng(1)
    fv = rng.normal(size=len(sigma))
    f = BoundedDensity.on(sigma, fv)
    exp = expand(f, one, sigma, g, tr)
    expb = expand(one, one, sigma, g, tr)
    t = exp.tree
    mean = lambda node: fv[t.cell_node[t.node_depth[node]] == node].mean()
    for ch in chains:
        ks = sorted(ch.nodes)
        for k in ks[1:-1]:
            want = mean(ch.nodes[k - 1]) - mean(ch.nodes[k])
            assert b_coefficient(ch, k, exp, one, sigma) == pytest.approx(want, abs=1e-12)
            assert b_coefficient(ch, k, expb, one, sigma) == pytest.approx(0, abs=1e-12)
