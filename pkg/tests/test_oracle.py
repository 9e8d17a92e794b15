import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp

from robust_mflqg.consistency import solve_consistency
from robust_mflqg.control import build_decentralized_law, synthesized_open_loop
from robust_mflqg.errors import NotConcave, TooLarge
from robust_mflqg.model import Horizon
from robust_mflqg.numerics import TimeGrid
from robust_mflqg.oracle import (
    aggregate_stacked_are,
    bruteforce_worstcase_drift,
    build_stacked,
    compare_worstcase_drift,
    decentralized_worstcase_value,
    gateaux_stationarity,
    optimality_gap_sweep,
    solve_centralized_minimax,
)
from robust_mflqg.riccati import solve_bundle, solve_P_infinite

from conftest import load, scalar_model


def setup(m, steps=None):
    b = solve_bundle(m, TimeGrid(0.0, m.horizon.T, steps) if steps else None)
    return b, solve_consistency(m, b)[0]


# -- stacked system ---------------------------------------------------------------


def test_stacked_weights_for_three_agents(example):
    s = build_stacked(example, 3)
    expect = np.full((3, 3), -0.25) + np.eye(3)
    np.testing.assert_allclose(s.Q_hat, expect, atol=1e-15)
    np.testing.assert_allclose(s.A_check, np.eye(3) - 0.5, atol=1e-15)
    assert s.R_joint[-1, -1] == -3.0


def test_single_agent_collapse(example):
    s = build_stacked(example, 1)
    assert s.Q_hat[0, 0] == pytest.approx(0.25, abs=1e-15)
    assert s.A_check[0, 0] == -0.5
    no_coupling = build_stacked(example.replace(Gamma=np.zeros((1, 1))), 4)
    np.testing.assert_allclose(no_coupling.Q_hat, np.eye(4), atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(N=st.integers(1, 16), g=st.floats(-2, 2), q=st.floats(0.1, 3))
def test_aggregation_identity(N, g, q):
    m = load("two_dim")
    m = m.replace(Gamma=g * np.eye(2) + 0.1 * np.array([[0, 1], [-1, 0]]), Q=q * m.Q)
    assert build_stacked(m, N).aggregation_error(m) <= 1e-12 * max(1.0, q * (1 + abs(g)) ** 2)


def test_too_large(example):
    with pytest.raises(TooLarge):
        build_stacked(example, 513)
    with pytest.raises(TooLarge):
        solve_centralized_minimax(example, 257, TimeGrid(0, 1, 10))


# -- brute-force drift ---------------------------------------------------------------


def test_bruteforce_matches_drift_law(example, example_bundle, example_profile):
    ag = compare_worstcase_drift(example, example_bundle, example_profile)
    assert ag.max_node_error <= 1e-4
    assert ag.bruteforce.grad_norm <= 1e-10


def test_bruteforce_converges_under_refinement(example):
    errs = [compare_worstcase_drift(example, *setup(example, s)).max_node_error for s in (250, 500)]
    assert errs[1] <= errs[0] / 2


def test_bruteforce_agrees_for_several_agents(example, example_bundle, example_profile):
    ag = compare_worstcase_drift(example, example_bundle, example_profile, N=3)
    assert ag.max_node_error <= 1e-4


def test_no_tracking_means_no_drift():
    m = scalar_model(Q=0.0, H=0.0)
    b, p = setup(m, 200)
    u = synthesized_open_loop(m, build_decentralized_law(m, b, p), p, 2)
    bf = bruteforce_worstcase_drift(m, u, b.grid)
    assert np.max(np.abs(bf.f)) <= 1e-12


def test_not_concave_when_drift_is_cheap():
    m = load("blowup_case")
    grid = TimeGrid(0.0, 1.0, 200)
    with pytest.raises(NotConcave):
        bruteforce_worstcase_drift(m, np.zeros((201, 1, 1)), grid)


def test_gateaux_stationarity(example, example_bundle, example_profile):
    rep = gateaux_stationarity(example, example_bundle, example_profile, directions=10)
    assert len(rep.derivatives) == 10 and rep.max_ratio <= 1e-6
    # exactness of central differences on a quadratic
    other = gateaux_stationarity(example, example_bundle, example_profile, directions=3, eps=0.1)
    np.testing.assert_allclose(other.derivatives, rep.derivatives[:3], atol=1e-9)


# -- LQ values -----------------------------------------------------------------------


def _single_agent_reference(a, s, Qh, q, const, sig2, H, m0, v0, T):
    """Backward (Pi, xi, c) for one agent, integrated in time-to-go."""
    def rhs(_, y):
        Pi, xi, _c = y
        return [2 * a * Pi + Qh - s * Pi ** 2, (a - s * Pi) * xi + q,
                0.5 * const - 0.5 * s * xi ** 2 + 0.5 * sig2 * Pi]
    sol = solve_ivp(rhs, (0, T), [H, 0.0, 0.0], method="DOP853", rtol=1e-13, atol=1e-15)
    Pi, xi, c = sol.y[:, -1]
    return 0.5 * m0 ** 2 * Pi + 0.5 * v0 * Pi + xi * m0 + c, Pi


def test_single_agent_minimax_matches_reference():
    m = scalar_model(R2=2.0, eta=0.4)
    grid = TimeGrid(0.0, 1.0, 2000)
    v = solve_centralized_minimax(m, 1, grid)
    # (1 - Gamma) x - eta tracking: Qh = 0.25, q = -0.2, constant 0.16; s = 1/R1 - 1/R2
    ref, Pi0 = _single_agent_reference(-0.5, 0.5, 0.25, -0.2, 0.16, 0.01, 1.0, 1.0, 0.09, 1.0)
    assert abs(v.Pi.values[0, 0, 0] - Pi0) <= 1e-9
    assert abs(v.value - ref) <= 1e-9


def test_zero_scenario_has_no_value(homogeneous):
    b, p = setup(homogeneous)
    tab = optimality_gap_sweep(homogeneous, b, p, [2, 4])
    for r in tab.rows:
        assert r.centralized == 0 and r.decentralized == 0 and r.gap == 0


def test_gap_ordering(example, example_bundle, example_profile, tmp_path):
    tab = optimality_gap_sweep(example, example_bundle, example_profile, [2, 4, 8])
    assert tab.nonnegative and tab.nonincreasing and tab.sqrtN_ratio <= 3.0
    assert all(r.gap > 0 for r in tab.rows)
    tab.to_csv(tmp_path / "gap.csv")
    head = (tmp_path / "gap.csv").read_text().splitlines()[0]
    assert head == "N,centralized_value,decentralized_value,gap,gap_times_sqrtN"


def test_decentralized_value_dominates(example, example_bundle, example_profile):
    # the full-information drift can only do better against fixed laws
    grid = example_bundle.grid
    for N in (1, 3):
        assert (decentralized_worstcase_value(example, example_bundle, example_profile, N).value
                >= solve_centralized_minimax(example, N, grid).value - 1e-10)


# -- infinite horizon ------------------------------------------------------------------


@pytest.mark.parametrize("N", [1, 5])
def test_aggregate_are_matches_closed_form(scalar_inf, N):
    X = aggregate_stacked_are(scalar_inf, N)
    assert abs(X[0, 0] - (-4.0 + np.sqrt(15.0))) <= 1e-8


def test_aggregate_are_matches_mean_field_solution():
    m = load("scalar_infinite").replace(horizon=Horizon.infinite_horizon(0.3))
    np.testing.assert_allclose(aggregate_stacked_are(m, 4), solve_P_infinite(m), atol=1e-8)


def test_aggregate_are_without_tracking(scalar_inf):
    assert np.all(np.abs(aggregate_stacked_are(scalar_inf.replace(Q=np.zeros((1, 1))), 3)) <= 1e-14)
