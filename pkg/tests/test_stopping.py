import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from localtb.geometry import Cube, reference_grid, sample_grid
from localtb.harness import generate_scenario
from localtb.measure import BoundedDensity, CellMask, CellMeasure, cells_in_cube, polar_decompose
from localtb.sqfn import square_function_field
from localtb.stopping import (StoppingConfig, accretivity_stopping, choose_lambda0, construct_big_piece,
                              dense_balls_contained, density_stopping, high_density_exceptional, sample_T_masks,
                              sf_of_b, suppression_set)

Q1 = Cube((-0.5,), 1.0)
H = 1 / 64


def uniform(h: float = H) -> CellMeasure:
    half = round(0.5 / h)
    return CellMeasure(h, np.arange(-half, half)[:, None], np.full(2 * half, h), Q1)


def test_accretivity_trivial_density():
    sigma = uniform()
    b = BoundedDensity.on(sigma, 1.0)
    cubes, T = accretivity_stopping(sigma, b, sample_grid(Q1, 4, pitch=H), 0.5)
    assert cubes == [] and len(T) == 0


def test_accretivity_sign_flip_stops_at_root():
    sigma = uniform()
    vals = np.where(sigma.coords[:, 0] < 0, 1.0, -1.0)
    b = BoundedDensity.on(sigma, vals)
    g = reference_grid(Q1, pitch=H)
    cubes, T = accretivity_stopping(sigma, b, g, 0.5)
    assert cubes == [g.root]
    assert len(T) == len(sigma)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 20), phases=st.lists(st.floats(-math.pi, math.pi), min_size=64, max_size=64),
       c=st.floats(0.1, 0.9))
def test_accretivity_cubes_are_maximal(seed, phases, c):
    sigma = uniform()
    b = BoundedDensity.on(sigma, np.exp(1j * np.array(phases)))
    cubes, _ = accretivity_stopping(sigma, b, sample_grid(Q1, seed, pitch=H), c)
    for i, P in enumerate(cubes):
        for j, R in enumerate(cubes):
            if i != j:
                assert not P.contains_cube(R)


@pytest.mark.parametrize("kind", ["lebesgue-1d", "cantor-1d", "spike-mix", "line-in-plane"])
def test_T_budget_on_scenarios(kind):
    sc = generate_scenario(kind)
    sigma, b = polar_decompose(sc.nu)
    eta = sc.cfg.eta
    assert eta == 0.5 / sc.cfg.B1
    _, masks = sample_T_masks(sigma, b, sc.Q, 32, sc.seed, sc.cfg.c_acc)
    sQ = sigma.total_variation()
    for T in masks:
        assert T.measure_of(sigma) <= (1 - eta) * sQ


def test_density_stopping_identity():
    mu = uniform()
    cfg = StoppingConfig(B1=1.0)
    ds = density_stopping(mu, mu, reference_grid(Q1, pitch=H), cfg)
    assert ds.F1 == [] and ds.F2 == [] and len(ds.H1_mask) == 0
    assert np.all(ds.phi.values == 1)


def test_density_stopping_flags_heavy_cell():
    mu = uniform()
    cfg = StoppingConfig(B1=1.0, eps0=1 / 32)
    w = mu.weights.real.copy()
    j = 40
    w[j] = 10 * (cfg.B1 / cfg.eps0) * w[j]
    sigma = mu.with_weights(w)
    g = reference_grid(Q1, pitch=H)
    ds = density_stopping(mu, sigma, g, cfg)
    assert ds.F1
    assert ds.H1_mask.contains_cells(mu.coords[j:j + 1])[0]
    for P in ds.F1:
        assert sigma.cube_mass(P, absolute=True) > cfg.B1 / cfg.eps0 * mu.cube_mass(P, absolute=True)


@settings(max_examples=25, deadline=None)
@given(amp=st.lists(st.floats(0.2, 3.0), min_size=64, max_size=64), data=st.data())
def test_sandwich_off_H1(amp, data):
    mu = uniform()
    sigma = mu.with_weights(mu.weights.real * np.array(amp))
    cfg = StoppingConfig(B1=1.5, eps0=1 / 8)
    ds = density_stopping(mu, sigma, reference_grid(Q1, pitch=H), cfg)
    free = ~ds.H1_mask.contains_cells(mu.coords)
    pick = np.array(data.draw(st.lists(st.booleans(), min_size=64, max_size=64))) & free
    mA = math.fsum(mu.abs_weights[pick])
    sA = math.fsum(sigma.abs_weights[pick])
    assert cfg.delta * mA <= sA * (1 + 1e-12) + 1e-15
    assert sA <= cfg.B1 / cfg.eps0 * mA * (1 + 1e-12) + 1e-15


def test_H1_budget_on_scenarios():
    for kind in ("lebesgue-1d", "cantor-1d", "spike-mix"):
        sc = generate_scenario(kind)
        sigma = sc.nu.variation()
        ds = density_stopping(sc.mu, sigma, reference_grid(sc.Q, pitch=sc.pitch), sc.cfg, sc.Q)
        assert ds.H1_mask.measure_of(sigma) <= 2 * sc.cfg.delta * sigma.total_variation()


def test_change_of_measure_round_trip():
    mu = uniform()
    rng = np.random.default_rng(1)
    sigma = mu.with_weights(mu.weights.real * rng.uniform(0.5, 2.0, len(mu)))
    cfg = StoppingConfig(B1=2.0, eps0=1 / 8)
    ds = density_stopping(mu, sigma, reference_grid(Q1, pitch=H), cfg)
    G = ~ds.H1_mask.contains_cells(mu.coords)
    phi = ds.phi
    assert np.array_equal(phi.coords, mu.coords[G])
    g = rng.normal(size=int(G.sum()))
    sc = generate_scenario("lebesgue-1d", {"h": H})  # for its kernel and quadrature
    g_mu = CellMeasure(H, mu.coords[G], g * mu.weights.real[G], Q1)
    g_sigma = CellMeasure(H, mu.coords[G], g / phi.values.real * sigma.weights.real[G], Q1)
    Vmu = square_function_field(g_mu, sc.quad, sc.kernel, mu.coords[G])
    Vsig = square_function_field(g_sigma, sc.quad, sc.kernel, mu.coords[G])
    lhs = math.sqrt(math.fsum(Vmu ** 2 * mu.weights.real[G]))
    rhs = math.sqrt(math.fsum(Vsig ** 2 * sigma.weights.real[G]))
    assert lhs <= rhs / math.sqrt(cfg.delta) * (1 + 1e-10)


def test_high_density_uniform_is_empty():
    mu = uniform()
    hd = high_density_exceptional(mu, mu, 1.0, 1 / 32)
    assert len(hd.H2_mask) == 0
    assert hd.density_threshold > 2.0


def test_high_density_catches_heavy_cell():
    mu = uniform(1 / 256)
    w = mu.weights.real.copy()
    j = 100
    w[j] += 1.0
    nu = mu.with_weights(w)
    hd = high_density_exceptional(nu, mu, 1.0, 1 / 32)
    assert hd.H2_mask.contains_cells(mu.coords[j:j + 1])[0]
    assert dense_balls_contained(hd)


def test_spike_scenario_dense_balls_contained():
    sc = generate_scenario("spike-mix")
    hd = high_density_exceptional(sc.nu, sc.mu, sc.m, sc.cfg.eps0, sc.Q)
    assert dense_balls_contained(hd)


def test_choose_lambda0_examples():
    assert choose_lambda0(StoppingConfig(C1_weak=1.0, delta0=0.5, s=1.0)) == pytest.approx(4 * 1.01)
    assert choose_lambda0(StoppingConfig(C1_weak=1.0, delta0=0.5, s=2.0)) == pytest.approx(2 * 1.01)


@settings(max_examples=50, deadline=None)
@given(a=st.floats(0.01, 0.98), b=st.floats(0.01, 0.98), s=st.floats(0.5, 3), C1=st.floats(0.1, 10))
def test_choose_lambda0_monotone_in_delta0(a, b, s, C1):
    lo, hi = sorted((a, b))
    f = lambda d: choose_lambda0(StoppingConfig(C1_weak=C1, delta0=d, s=s))
    assert f(lo) <= f(hi)


def test_suppression_set_extremes():
    sc = generate_scenario("cantor-1d", {"h": 1 / 128})
    sigma, b = polar_decompose(sc.nu)
    V = sf_of_b(sigma, b, sc.Q, sc.quad, sc.kernel)
    assert len(suppression_set(sigma, b, sc.Q, sc.quad, sc.kernel, float(V.max()) * 1.001)) == 0
    everything = suppression_set(sigma, b, sc.Q, sc.quad, sc.kernel, 1e-300)
    assert len(everything) == int(np.sum(V > 0))


def test_big_piece_trivial_case():
    sigma = uniform()
    b = BoundedDensity.on(sigma, 1.0)
    cfg = StoppingConfig()
    empty = CellMask.empty(H, 1)
    bp = construct_big_piece(sigma, empty, empty, Q1, 256, 0, cfg, b)
    assert np.all(bp.membership_prob == 1)
    assert len(bp.G_mask) == len(sigma)
    assert np.all(bp.standard_error <= 1 / 32)


@pytest.mark.parametrize("kind", ["lebesgue-1d", "spike-mix"])
def test_big_piece_measure_bound(kind):
    sc = generate_scenario(kind)
    sigma, b = polar_decompose(sc.nu)
    cfg = sc.cfg
    hd = high_density_exceptional(sc.nu, sc.mu, sc.m, cfg.eps0, sc.Q)
    ds = density_stopping(sc.mu, sigma, reference_grid(sc.Q, pitch=sc.pitch), cfg, sc.Q)
    Hm = ds.H1_mask.union(hd.H2_mask)
    bp = construct_big_piece(sigma, Hm, CellMask.empty(sc.pitch, sc.n), sc.Q, 256, sc.seed, cfg, b)
    sQ = sigma.total_variation()
    sG = bp.G_mask.measure_of(sigma)
    se = math.sqrt(math.fsum((bp.standard_error * sigma.align(bp.cells).real) ** 2))
    assert sG >= (1 - cfg.delta1) / (1 + cfg.delta1) * sQ - 3 * se
    inside = cells_in_cube(bp.cells, sc.pitch, sc.Q)
    assert inside.all()
    assert not np.any(bp.G_mask.contains_cells(Hm.coords))


def test_config_validation():
    with pytest.raises(ValueError):
        StoppingConfig(B1=0.5)
    with pytest.raises(ValueError):
        StoppingConfig(eps0=1.0)
    cfg = StoppingConfig(B1=2.0)
    assert cfg.c_acc == 0.25 and cfg.delta == 0.25 / 16 and cfg.delta0 == 1 - 0.125
