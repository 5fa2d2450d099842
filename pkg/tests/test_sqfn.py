import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from localtb._numerics import weak_type_functional
from localtb.geometry import Cube
from localtb.harness import generate_scenario
from localtb.kernel import KernelSpec, SuppressedKernel
from localtb.measure import BoundedDensity, CellMask, CellMeasure
from localtb.sqfn import (LatticeSF, TimeQuadrature, restricted_operator_norm, square_function_field,
                          tail_estimate_check, theta, vertical_sf)

STD = KernelSpec(1.0, 1.0)
WIDE = Cube((-4.0,), 8.0)


def unit_cell(h: float) -> CellMeasure:
    """Unit mass spread over the cells of pitch h filling [-h0/2, h0/2) with h0 = 1/1024."""
    k = max(1, round((1 / 1024) / h))
    coords = np.arange(-k // 2, -k // 2 + k)[:, None] if k > 1 else np.array([[0]])
    return CellMeasure(h, coords, np.full(len(coords), 1.0 / len(coords)), WIDE)


def test_theta_zero_measure():
    assert theta(CellMeasure.empty(1 / 64, WIDE), [0.0], 1.0, STD) == 0


def test_theta_unit_cell_matches_refined_quadrature():
    coarse = theta(unit_cell(1 / 1024), [2.0], 1.0, STD)
    fine = theta(unit_cell(1 / 4096), [2.0], 1.0, STD)
    assert abs(coarse / fine - 1) <= 0.01
    assert abs(coarse) == pytest.approx(1 / 9, rel=0.01)


@settings(max_examples=40, deadline=None)
@given(a=st.lists(st.floats(-5, 5), min_size=8, max_size=8), b=st.lists(st.floats(-5, 5), min_size=8, max_size=8),
       x=st.floats(-1, 1), t=st.floats(0.5, 4))
def test_theta_is_linear(a, b, x, t):
    h = 1 / 8
    coords = np.arange(-4, 4)[:, None]
    n1 = CellMeasure(h, coords, a, WIDE)
    n2 = CellMeasure(h, coords, b, WIDE)
    both = CellMeasure(h, coords, np.add(a, b), WIDE)
    lhs = theta(both, [x], t, STD)
    rhs = theta(n1, [x], t, STD) + theta(n2, [x], t, STD)
    assert abs(lhs - rhs) <= 1e-12 * (1 + sum(abs(np.add(np.abs(a), np.abs(b)))))


def test_beta_integral_oracle():
    h = 2.0 ** -13
    nu = CellMeasure(h, [[0]], [1.0], WIDE)
    quad = TimeQuadrature(1e-3, 1e3, 16)
    V = vertical_sf(nu, [1.0], quad, STD).value
    assert V == pytest.approx(math.sqrt(1 / 6), rel=0.02)


def test_truncated_square_function_is_smaller():
    sc = generate_scenario("cantor-1d", {"h": 1 / 128})
    full = TimeQuadrature(4 * sc.pitch, 2.0 ** 10, 16)
    trunc = full.truncated(1.0)
    for x in sc.mu.centers[::7]:
        assert vertical_sf(sc.nu, x, trunc, sc.kernel).value <= vertical_sf(sc.nu, x, full, sc.kernel).value


def test_zero_measure_square_function():
    quad = TimeQuadrature(0.1, 1.0)
    assert vertical_sf(CellMeasure.empty(1 / 64, WIDE), [0.0], quad, STD).value == 0.0


def test_lattice_operator_matches_direct_sum():
    sc = generate_scenario("line-in-plane", {"h": 1 / 16})
    quad = sc.quad
    field = square_function_field(sc.nu, quad, sc.kernel)
    direct = np.array([vertical_sf(sc.nu, x, quad, sc.kernel).value for x in sc.nu.centers])
    assert np.allclose(field, direct, rtol=1e-10)


def test_lattice_adjoint():
    rng = np.random.default_rng(0)
    src = np.arange(-6, 6)[:, None]
    dst = np.arange(-3, 9)[:, None]
    op = LatticeSF(1 / 16, src, dst, STD, [0.25, 0.5])
    f = rng.normal(size=len(src)) + 1j * rng.normal(size=len(src))
    g = rng.normal(size=(2, len(dst))) + 1j * rng.normal(size=(2, len(dst)))
    lhs = np.vdot(g, op.theta(f))
    rhs = np.vdot(op.adjoint(g), f)
    assert lhs == pytest.approx(rhs, rel=1e-10)


def test_tail_estimate_oracle_and_bound():
    one = CellMeasure(1e-4, [[-1]], [1.0], WIDE)
    f = BoundedDensity.on(one, 1.0)
    lhs, rhs = tail_estimate_check(f, one, Cube((-0.5,), 1.0), STD)
    assert lhs == pytest.approx(0.5, rel=0.02)
    assert lhs <= rhs
    lhs2, _ = tail_estimate_check(f, one, Cube((-1.0,), 2.0), STD)
    assert lhs2 < lhs
    zero = BoundedDensity.on(one, 0.0)
    assert tail_estimate_check(zero, one, Cube((-0.5,), 1.0), STD)[0] == 0.0


@pytest.mark.parametrize("kind", ["lebesgue-1d", "cantor-1d", "line-in-plane", "spike-mix"])
def test_tail_bound_on_scenarios(kind):
    sc = generate_scenario(kind)
    f = BoundedDensity.on(sc.nu, 1.0)
    lhs, rhs = tail_estimate_check(f, sc.nu.variation(), sc.Q, sc.kernel)
    assert lhs <= rhs


def test_restricted_norm_single_cell():
    h = 1 / 64
    Q = Cube((-0.5,), 1.0)
    sigma = CellMeasure(h, [[3]], [1.0], Q)
    quad = TimeQuadrature(4 * h, 1.0)
    est = restricted_operator_norm(sigma, np.array([True]), Q, quad, STD)
    direct = vertical_sf(sigma, sigma.centers[0], quad, STD).value
    assert est.value == pytest.approx(direct, rel=1e-10)


def test_restricted_norm_zero_on_empty_support():
    h = 1 / 64
    Q = Cube((-0.5,), 1.0)
    sigma = CellMeasure(h, [[3]], [1.0], Q)
    G = CellMask(h, np.array([[5]]))
    assert restricted_operator_norm(sigma, G, Q, TimeQuadrature(4 * h, 1.0), STD).value == 0.0


@settings(max_examples=12, deadline=None)
@given(data=st.data())
def test_restricted_norm_monotone_in_G(data):
    sc = generate_scenario("cantor-1d", {"h": 1 / 128})
    sigma = sc.nu.variation()
    M = len(sigma)
    small = np.array(data.draw(st.lists(st.booleans(), min_size=M, max_size=M)))
    if not small.any():
        small[0] = True
    extra = np.array(data.draw(st.lists(st.booleans(), min_size=M, max_size=M)))
    big = small | extra
    a = restricted_operator_norm(sigma, small, sc.Q, sc.quad, sc.kernel, iters=200, tol=1e-8)
    b = restricted_operator_norm(sigma, big, sc.Q, sc.quad, sc.kernel, iters=200, tol=1e-8)
    assert a.value <= b.value * (1 + 1e-6) + b.gap


@pytest.mark.parametrize("kind", ["lebesgue-1d", "cantor-1d", "line-in-plane", "spike-mix", "lebesgue-2d"])
def test_quadrature_refinement_under_one_percent(kind):
    sc = generate_scenario(kind)
    V16 = square_function_field(sc.nu, sc.quad, sc.kernel, sc.mu.coords)
    V32 = square_function_field(sc.nu, sc.quad.refined(), sc.kernel, sc.mu.coords)
    assert np.max(np.abs(V32 - V16) / V32) < 0.01


def test_suppressed_field_identities():
    sc = generate_scenario("spike-mix", {"h": 1 / 256})
    V = square_function_field(sc.nu, sc.quad, sc.kernel, sc.mu.coords)
    S0 = V > np.quantile(V, 0.8)
    mask = CellMask(sc.pitch, sc.mu.coords[S0])
    Vt = square_function_field(sc.nu, sc.quad, SuppressedKernel(sc.kernel, mask), sc.mu.coords)
    assert np.array_equal(Vt[~S0], V[~S0])
    assert np.all(Vt[S0] == 0)


def test_chebyshev_from_operator_norm():
    sc = generate_scenario("lebesgue-1d", {"h": 1 / 128})
    sigma = sc.nu.variation()
    allG = np.ones(len(sigma), dtype=bool)
    K = restricted_operator_norm(sigma, allG, sc.Q, sc.quad, sc.kernel, iters=200, tol=1e-8).value
    rng = np.random.default_rng(3)
    for _ in range(4):
        g = rng.normal(size=len(sigma))
        V = square_function_field(sigma.with_weights(g * sigma.weights), sc.quad, sc.kernel)
        weak = weak_type_functional(V, sigma.abs_weights, 1.0)
        l2 = math.sqrt(math.fsum(g ** 2 * sigma.abs_weights))
        assert weak <= K * l2 * math.sqrt(sigma.total_variation()) * (1 + 1e-3)


def test_time_below_floor_rejected():
    nu = CellMeasure(1 / 16, [[0]], [1.0], WIDE)
    with pytest.raises(ValueError):
        theta(nu, [0.0], 1 / 32, STD)
    with pytest.raises(ValueError):
        TimeQuadrature(1 / 64, 1.0).check_pitch(1 / 16)
