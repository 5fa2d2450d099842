import functools
import json
import math

import numpy as np
import pytest

from localtb.geometry import Cube
from localtb.harness import (KINDS, PipelineError, Scenario, generate_scenario, restrict_scenario, run_pipeline,
                             subcube_family, validate_hypotheses, vertical_field)
from localtb.measure import CellMask, growth_order_constant, polar_decompose, radius_ladder
from localtb.stopping import construct_big_piece, high_density_exceptional, suppression_set


@functools.lru_cache(maxsize=None)
def quick_report(kind: str):
    sc = generate_scenario(kind)
    return sc, run_pipeline(sc, refine=False, check_determinism=False)


def _ledger(rows):
    return {r.key: r.ok for r in rows}


def test_lebesgue_trivial_density_passes_with_B1_one():
    sc = generate_scenario("lebesgue-1d", {"pert": 0.0})
    assert sc.cfg.B1 == 1.0
    assert np.all(sc.nu.weights == sc.mu.weights)
    assert all(_ledger(validate_hypotheses(sc)).values())


@pytest.mark.parametrize("kind", KINDS)
def test_default_scenarios_validate(kind):
    sc = generate_scenario(kind)
    assert all(_ledger(validate_hypotheses(sc)).values())
    assert sc.nu.cube_mass(sc.Q) == pytest.approx(sc.mu.mass(), rel=1e-12)


def test_absolute_continuity_threshold_for_trivial_density():
    # with nu = mu the worst union has |nu|(A) = eps0 mu(Q), against the limit ||nu|| / 32
    ok = generate_scenario("lebesgue-1d", {"pert": 0.0, "eps0": 1 / 32})
    bad = generate_scenario("lebesgue-1d", {"pert": 0.0, "eps0": 1 / 16})
    assert _ledger(validate_hypotheses(ok))["absolute_continuity"]
    assert not _ledger(validate_hypotheses(bad))["absolute_continuity"]


def test_cantor_growth_is_bounded():
    sc = generate_scenario("cantor-1d", {"depth": 6})
    assert sc.m == pytest.approx(math.log(2) / math.log(3))
    rep = growth_order_constant(sc.mu, sc.m, radius_ladder(sc.pitch, 1.0))
    assert rep.constant <= 4.0


def test_spike_in_nu_fails_absolute_continuity():
    sc = generate_scenario("spike-mix", {"nu_spike": 0.5})
    led = _ledger(validate_hypotheses(sc))
    assert not led["absolute_continuity"]
    with pytest.raises(PipelineError) as info:
        run_pipeline(sc, refine=False, check_determinism=False)
    assert info.value.stage == "validate"


def test_normalization_failure_detected():
    sc = generate_scenario("lebesgue-1d")
    scaled = Scenario(**{**sc.__dict__, "nu": sc.nu.scaled(1.5)})
    assert not _ledger(validate_hypotheses(scaled))["normalization"]


def test_spike_lands_in_H2_and_not_in_G():
    sc, rep = quick_report("spike-mix")
    j = int(np.argmax(sc.mu.weights.real))
    spike = sc.mu.coords[j:j + 1]
    masks = rep.stopping.masks
    assert masks["H2"].contains_cells(spike)[0]
    assert not masks["G"].contains_cells(spike)[0]
    assert rep.stopping.measures["mu_G"] >= 0.5 * rep.stopping.measures["mu_Q"]


@pytest.mark.parametrize("kind", KINDS)
def test_measure_chain_of_the_big_piece(kind):
    sc, rep = quick_report(kind)
    m = rep.stopping.measures
    cfg = rep.stopping.constants
    assert m["mu_Q"] <= m["sigma_Q"] * (1 + 1e-12)
    c = (1 - cfg["delta1"]) / (1 + cfg["delta1"])
    assert m["sigma_G"] >= 0.5 * c * m["sigma_Q"]
    assert m["mu_G"] >= cfg["delta"] * c * m["mu_Q"]


@pytest.mark.parametrize("kind", KINDS)
def test_refinement_stability(kind):
    sc, coarse = quick_report(kind)
    # the refined scenario halves the pitch and keeps the coarse time floor
    sc_fine = sc.refined()
    assert sc_fine.pitch == sc.pitch / 2 and sc_fine.quad.t_min == sc.quad.t_min
    fine = run_pipeline(sc_fine, refine=False, check_determinism=False)
    frac = lambda rep: rep.stopping.measures["mu_G"] / rep.stopping.measures["mu_Q"]
    assert abs(frac(fine) - frac(coarse)) <= 0.1
    a, b = coarse.restricted_norm["G_mu"], fine.restricted_norm["G_mu"]
    assert abs(b / a - 1) <= 0.5


@pytest.mark.parametrize("kind", KINDS)
def test_necessity_direction(kind):
    _, rep = quick_report(kind)
    row = rep.ledger[11]
    assert row.ok
    assert row.detail["weak_functional"] <= row.detail["limit"]


def test_stage_isolation_without_suppression():
    sc = generate_scenario("lebesgue-1d", {"pert": 0.0, "h": 1 / 128})
    sigma, b = polar_decompose(sc.nu)
    V = vertical_field(sc.nu, sc.quad, sc.kernel, sigma.coords)
    lam0 = 1.01 * float(V.max())
    S0 = suppression_set(sigma, b, sc.Q, sc.quad, sc.kernel, lam0)
    assert len(S0) == 0
    hd = high_density_exceptional(sc.nu, sc.mu, sc.m, sc.cfg.eps0, sc.Q)
    a = construct_big_piece(sigma, hd.H2_mask, S0, sc.Q, 128, sc.seed, sc.cfg, b)
    inf = construct_big_piece(sigma, hd.H2_mask, CellMask.empty(sc.pitch, 1), sc.Q, 128, sc.seed, sc.cfg, b)
    assert a.G_mask == inf.G_mask
    assert np.array_equal(a.membership_prob, inf.membership_prob)


def test_pipeline_report_shape_and_determinism():
    sc = generate_scenario("cantor-1d", {"h": 1 / 128})
    a = run_pipeline(sc, refine=False, check_determinism=True)
    b = run_pipeline(sc, refine=False, check_determinism=True)
    assert sorted(a.ledger) == list(range(1, 13))
    assert a.ledger[12].ok
    assert a.to_json() == b.to_json()
    d = json.loads(a.to_json())
    assert d["scenario"] == sc.scenario_id
    assert sorted(d["ledger"]) == sorted(str(k) for k in range(1, 13))
    assert "case12" in a.estimates_csv()


def test_override_runs_failing_scenario():
    sc = generate_scenario("spike-mix", {"nu_spike": 0.5, "h": 1 / 512})
    rep = run_pipeline(sc, refine=False, check_determinism=False, override=True)
    assert not all(r.ok for r in rep.hypotheses)


def test_scenario_json_round_trip():
    sc = generate_scenario("spike-mix", {"h": 1 / 512}, seed=3)
    back = Scenario.from_json(sc.to_json())
    assert back.scenario_id == sc.scenario_id
    assert np.array_equal(back.nu.weights, sc.nu.weights)
    assert back.cfg == sc.cfg


def test_parameter_validation():
    with pytest.raises(ValueError):
        generate_scenario("torus")
    with pytest.raises(ValueError):
        generate_scenario("lebesgue-1d", {"h": 0.3})
    with pytest.raises(ValueError):
        generate_scenario("lebesgue-1d", {"bogus": 1})
    with pytest.raises(ValueError):
        generate_scenario("lebesgue-1d", {"t_min": 1 / 512})
    with pytest.raises(ValueError):
        generate_scenario("cantor-1d", {"depth": 0})


@pytest.mark.parametrize("kind,level", [("lebesgue-1d", 2), ("cantor-1d", 2), ("lebesgue-2d", 1)])
def test_subcube_family_restricted_data(kind, level):
    sc = generate_scenario(kind)
    fam = subcube_family(sc, level)
    assert fam and any(ok for _, ok in fam)
    for Q, ok in fam:
        assert Q.side == sc.Q.side / 2 ** level
        if not ok:
            continue
        sub = restrict_scenario(sc, Q)
        assert sub.nu.cube_mass(Q) == pytest.approx(sc.mu.cube_mass(Q, absolute=True), rel=1e-12)
        assert all(_ledger(validate_hypotheses(sub, Q)).values())
    with pytest.raises(ValueError):
        subcube_family(sc, 10)


def test_run_on_subcube():
    sc = generate_scenario("lebesgue-1d", {"h": 1 / 512})
    Q = Cube((-0.5,), 0.5)
    sub = restrict_scenario(sc, Q)
    rep = run_pipeline(sub, Q, refine=False, check_determinism=False)
    assert all(rep.ledger[k].ok for k in (1, 2, 3, 4, 5, 7, 11))
