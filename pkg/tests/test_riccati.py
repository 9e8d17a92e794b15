import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robust_mflqg.errors import BlowUp, NoAdmissibleSolution, NoStabilizingSolution
from robust_mflqg.model import Horizon, derived_weights
from robust_mflqg.numerics import TimeGrid, is_hurwitz
from robust_mflqg.riccati import (
    _ptilde_coefficients,
    closed_loop_abscissa,
    default_grid,
    ptilde_are_residual,
    riccati_residual_P,
    solve_bundle,
    solve_K_finite,
    solve_K_infinite,
    solve_P_finite,
    solve_P_infinite,
    solve_Ptilde_finite,
    solve_Ptilde_infinite,
)

from conftest import load, scalar_model

INF = Horizon.infinite_horizon(0.0)


def test_P_closed_form(example):
    g = default_grid(example, 2000)
    P = solve_P_finite(example, g)
    assert np.max(np.abs(P.values[:, 0, 0] - (-1 / (g.nodes + 1) - 0.5))) <= 1e-8
    assert P.values[-1, 0, 0] == -1.0


def test_zero_weights_give_zero_solutions(homogeneous):
    b = solve_bundle(homogeneous)
    for X in (b.P, b.K, b.Ptilde):
        assert np.all(X.values == 0.0)


def test_P_blowup_scenario():
    m = load("blowup_case")
    with pytest.raises(BlowUp) as exc:
        solve_P_finite(m, default_grid(m))
    assert exc.value.what == "P" and 0.9 < exc.value.time < 1.0


def test_K_fixed_point():
    k = 1 + np.sqrt(2)
    m = scalar_model(G=0.0, H=k)
    K = solve_K_finite(m, default_grid(m))
    assert np.max(np.abs(K.values - k)) <= 1e-12


@pytest.mark.parametrize("which", ["K", "Ptilde"])
def test_step_halving(example, which):
    vals = []
    for steps in (2000, 4000):
        b = solve_bundle(example, TimeGrid(0, 1, steps))
        vals.append(getattr(b, which).values[0])
    assert np.max(np.abs(vals[0] - vals[1])) <= 1e-9


def test_Ptilde_exists_on_early_interval(example_bundle):
    assert example_bundle.Ptilde.complete
    assert np.all(np.isfinite(example_bundle.Ptilde.values))


def test_terminal_values_and_symmetry(example_bundle):
    b = example_bundle
    assert b.P.values[-1, 0, 0] == -1 and b.K.values[-1, 0, 0] == 1 and b.Ptilde.values[-1, 0, 0] == 0
    m = load("two_dim")
    b2 = solve_bundle(m)
    for X in (b2.P, b2.K):
        assert X.max_asymmetry() <= 1e-9
    assert np.all(b2.P.values[-1] == -m.H) and np.all(b2.K.values[-1] == m.H)
    assert np.all(b2.Ptilde.values[-1] == 0)
    assert min(np.linalg.eigvalsh(K).min() for K in b2.K.values) >= -1e-12


@pytest.mark.parametrize("name", ["paper_example", "two_dim"])
def test_finite_residuals(name):
    m = load(name)
    b = solve_bundle(m)
    norms = np.linalg.norm(b.P.values, axis=(1, 2))
    assert np.all(riccati_residual_P(m, b.P) <= 1e-8 * (1 + norms ** 2))
    C, D, E, F = _ptilde_coefficients(m, b.P.values, b.K.values)
    X = b.Ptilde.values
    res = np.linalg.norm(b.Ptilde.derivs - (C + D @ X - X @ E - X @ F @ X), axis=(1, 2))
    assert np.all(res <= 1e-8 * (1 + np.linalg.norm(X, axis=(1, 2)) ** 2))


def test_P_decreases_with_Q():
    # larger tracking weight makes the maximization value more negative
    P0 = [solve_P_finite(m, default_grid(m)).values[0, 0, 0]
          for m in (scalar_model(Q=q, H=1.0) for q in (0.0, 0.5, 1.0, 2.0))]
    assert all(b <= a for a, b in zip(P0, P0[1:]))


def test_minus_P_positive_on_existence_interval(example_bundle):
    assert np.all(-example_bundle.P.values > 0)


# -- infinite horizon ---------------------------------------------------------------


def test_scalar_infinite_P(scalar_inf):
    P = solve_P_infinite(scalar_inf)
    assert abs(P[0, 0] - (-4 + np.sqrt(15))) <= 1e-12
    # the other root of P^2 + 8P + 1 = 0 gives an unstable closed loop
    assert -1 - (-4 - np.sqrt(15)) / 4 > 0
    assert closed_loop_abscissa(scalar_inf, P) < 0


def test_zero_Q_infinite(scalar_inf):
    m = scalar_inf.replace(Q=np.zeros((1, 1)))
    assert solve_P_infinite(m)[0, 0] == 0.0
    assert solve_K_infinite(m)[0, 0] == 0.0
    K = solve_K_infinite(m)
    Pt = solve_Ptilde_infinite(m, solve_P_infinite(m), K)
    assert np.all(Pt == 0.0)


def test_scalar_K_infinite():
    m = scalar_model(G=0.0, horizon=INF, H=0.0)
    assert abs(solve_K_infinite(m)[0, 0] - (1 + np.sqrt(2))) <= 1e-12


def test_scalar_Ptilde_infinite(scalar_inf):
    m = scalar_inf
    P, K = solve_P_infinite(m), solve_K_infinite(m)
    C, D, E, F = (x[0, 0] for x in _ptilde_coefficients(m, P, K))
    # C + (D - E) x - F x^2 = 0
    roots = np.roots([-F, D - E, C]).real
    a1, a2 = (m.A - m.S @ K + m.G - m.R2inv @ P)[0, 0], (m.A + m.G - m.R2inv @ P)[0, 0]
    ok = [x for x in roots if a1 - x / m.R2[0, 0] < 0 and a2 - x / m.R2[0, 0] < 0]
    assert len(ok) == 1
    assert abs(solve_Ptilde_infinite(m, P, K)[0, 0] - ok[0]) <= 1e-12


def _random_stable_model(seed, rho=0.0):
    rng = np.random.default_rng(seed)
    n = 2
    A = rng.standard_normal((n, n))
    A -= (np.max(np.linalg.eigvals(A).real) + 1.0) * np.eye(n)
    X = rng.standard_normal((n, n))
    base = load("two_dim")
    return base.replace(A=A, G=0.2 * rng.standard_normal((n, n)), Q=X @ X.T + 0.1 * np.eye(n),
                        R2=(4 + rng.random()) * np.eye(n), H=np.zeros((n, n)),
                        Gamma=0.3 * rng.standard_normal((n, n)),
                        horizon=Horizon.infinite_horizon(rho))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.0, 0.1]))
def test_random_infinite_residuals(seed, rho):
    m = _random_stable_model(seed, rho)
    try:
        P = solve_P_infinite(m)
    except NoStabilizingSolution:
        return  # weights outside the concave regime
    half = 0.5 * rho * np.eye(2)
    a = m.A + m.G - half
    res = a.T @ P + P @ a - P @ m.R2inv @ P - derived_weights(m).QIG
    assert np.linalg.norm(res) <= 1e-10 * (1 + np.linalg.norm(P) ** 2)
    assert is_hurwitz(a - m.R2inv @ P) and np.all(P == P.T)
    K = solve_K_infinite(m)
    ak = m.A - half
    resK = ak.T @ K + K @ ak - K @ m.S @ K + m.Q
    assert np.linalg.norm(resK) <= 1e-10 * (1 + np.linalg.norm(K) ** 2)
    assert is_hurwitz(ak - m.S @ K)
    try:
        Pt = solve_Ptilde_infinite(m, P, K)
    except NoAdmissibleSolution:
        return  # no clean admissible invariant subspace for this draw
    assert ptilde_are_residual(m, P, K, Pt) <= 1e-10 * (1 + np.linalg.norm(Pt) ** 2)


def test_imaginary_axis_has_no_stabilizing_solution(scalar_inf):
    with pytest.raises(NoStabilizingSolution):
        solve_P_infinite(scalar_inf.replace(R2=np.array([[0.2]])))
