"""The ten acceptance criteria at their stated tolerances.

Each test records one ``[PASS]``/``[FAIL]`` line, printed in the terminal
summary, before asserting.
"""

import time

import numpy as np
import pytest

import conftest
from conftest import load
from robust_mflqg import _kernels
from robust_mflqg.consistency import (
    boundary_errors,
    consistency_residual,
    detect_Z_blowup,
    solve_consistency_finite,
    solve_consistency_finite_shooting,
    v_identity_error,
)
from robust_mflqg.control import (
    SimConfig,
    build_decentralized_law,
    build_worstcase_law,
    cost_decomposition_check,
    meanfield_error_sweep,
    simulate,
)
from robust_mflqg.convexity import check_A2prime_det, check_A2prime_riccati
from robust_mflqg.numerics import TimeGrid
from robust_mflqg.oracle import (
    aggregate_stacked_are,
    compare_worstcase_drift,
    gateaux_stationarity,
    optimality_gap_sweep,
)
from robust_mflqg.riccati import closed_loop_abscissa, default_grid, solve_bundle, solve_P_finite, solve_P_infinite


def report(k, ok, **detail):
    text = ", ".join(f"{key}={val:.6g}" if isinstance(val, float) else f"{key}={val}"
                     for key, val in detail.items())
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {k}: {text}"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


@pytest.fixture(scope="module")
def example():
    m = load("paper_example")
    # load compiled kernels (or their cache) outside the timed regions
    solve_P_finite(m, TimeGrid(0.0, 1.0, 10))
    b = solve_bundle(m, TimeGrid(0.0, 1.0, 20))
    prof, _ = solve_consistency_finite(m, b)
    simulate(m, build_decentralized_law(m, b, prof), build_worstcase_law(m, b, prof),
             SimConfig(2, 1))
    return m


@pytest.fixture(scope="module")
def solved(example):
    b = solve_bundle(example)
    prof, _ = solve_consistency_finite(example, b)
    return b, prof


def test_criterion_1_riccati_closed_form(example):
    grid = default_grid(example, 2000)
    t0 = time.perf_counter()
    P = solve_P_finite(example, grid)
    secs = time.perf_counter() - t0
    err = float(np.max(np.abs(P.values[:, 0, 0] - (-1.0 / (grid.nodes + 1.0) - 0.5))))
    ok = report(1, err <= 1e-8 and secs < 1.0, max_error=err, seconds=secs)
    assert ok


def test_criterion_2_z_blowup(example):
    t0 = time.perf_counter()
    b = solve_bundle(example)
    z = detect_Z_blowup(example, b)
    early = detect_Z_blowup(example, b, t_end=0.7)
    secs = time.perf_counter() - t0
    ok = (z.time is not None and abs(z.time - 0.758276) <= 5e-3 and early.time is None
          and secs < 5.0)
    report(2, ok, blowup_time=z.time, blowup_on_0_07=early.time, seconds=secs)
    assert ok


def test_criterion_3_certificates(example):
    good_det, good_ric = check_A2prime_det(example), check_A2prime_riccati(example, default_grid(example))
    bad = load("blowup_case")
    grid = default_grid(bad)
    bad_det, bad_ric = check_A2prime_det(bad), check_A2prime_riccati(bad, grid)
    gap = abs(bad_det.witness - bad_ric.witness)
    ok = (good_det.holds and good_ric.holds and not bad_det.holds and not bad_ric.holds
          and gap <= 2 * grid.h)
    report(3, ok, example_holds=good_det.holds and good_ric.holds,
           det_witness=bad_det.witness, riccati_witness=bad_ric.witness, steps_apart=gap / grid.h)
    assert ok


def test_criterion_4_consistency(example, solved):
    b, y = solved
    assert np.all(example.xbar0 == 1.0)
    s = solve_consistency_finite_shooting(example, b)
    diff = float(np.max(np.abs(y.state - s.state)))
    bc = float(max(boundary_errors(y, example).values()))
    v = v_identity_error(y, b)
    res = float(np.max(np.abs(consistency_residual(y, example, b))))
    ok = diff <= 1e-6 and bc <= 1e-8 and v <= 1e-8 and res <= 1e-5
    report(4, ok, route_gap=diff, boundary=bc, v_identity=v, residual=res)
    assert ok


def test_criterion_5_drift_oracle(example, solved):
    b, prof = solved
    ag = compare_worstcase_drift(example, b, prof)
    st = gateaux_stationarity(example, b, prof, directions=10, seed=0)
    ok = ag.max_node_error <= 1e-4 and len(st.derivatives) == 10 and st.max_ratio <= 1e-6
    report(5, ok, node_error=ag.max_node_error, gateaux=st.max_ratio)
    assert ok


def test_criterion_6_meanfield_rate(example, solved):
    b, prof = solved
    assert example.sigma[0, 0] == 0.1 and example.init_spread == 0.3
    law, drift = build_decentralized_law(example, b, prof), build_worstcase_law(example, b, prof)
    t0 = time.perf_counter()
    rep = meanfield_error_sweep(example, law, drift, [8, 16, 32, 64, 128], 512, seed=0)
    secs = time.perf_counter() - t0
    ok = rep.slope_in(-1.3, -0.7) and secs < 120.0
    report(6, ok, slope=rep.slope, seconds=secs, backend="numba" if _kernels.JIT_ENABLED else "numpy")
    assert ok


def test_criterion_7_gap_rate(example, solved):
    b, prof = solved
    tab = optimality_gap_sweep(example, b, prof, [2, 4, 8])
    gaps = [r.gap for r in tab.rows]
    ok = min(gaps) >= -1e-8 and tab.nonincreasing and tab.sqrtN_ratio <= 3.0
    report(7, ok, gaps=[f"{g:.4g}" for g in gaps], sqrtN_ratio=tab.sqrtN_ratio)
    assert ok


def test_criterion_8_infinite_are():
    m = load("scalar_infinite")
    P = solve_P_infinite(m)
    a, gamma, r2 = -1.0, 0.5, 4.0
    root_err = float(abs(P[0, 0] - (-4.0 + np.sqrt(15.0))))
    resid = float(abs(2 * a * P[0, 0] - P[0, 0] ** 2 / r2 - (1 - gamma) ** 2))
    hurwitz = closed_loop_abscissa(m, P) < -1e-9
    agg = float(np.max(np.abs(aggregate_stacked_are(m, 5) - P)))
    # discriminant variant with gamma^2 - 2 gamma - 1 (see the decisions ledger)
    alt = r2 * a + np.sqrt(r2 ** 2 * a ** 2 + r2 * (gamma ** 2 - 2 * gamma - 1))
    alt_resid = float(abs(2 * a * alt - alt ** 2 / r2 - (1 - gamma) ** 2))
    ok = root_err <= 1e-10 and resid <= 1e-10 and hurwitz and agg <= 1e-8
    report(8, ok, root_error=root_err, are_residual=resid, aggregate_error=agg,
           variant_value=float(alt), variant_residual=alt_resid)
    assert ok


def test_criterion_9_degenerate(example):
    quiet = example.replace(sigma=np.zeros_like(example.sigma), init_spread=0.0)
    b = solve_bundle(quiet)
    prof, _ = solve_consistency_finite(quiet, b)
    res = simulate(quiet, build_decentralized_law(quiet, b, prof), build_worstcase_law(quiet, b, prof),
                   SimConfig(16, 4, record_paths=True))
    dev = float(np.max(np.abs(res.xhat - prof.xbar[None])))

    h = load("homogeneous")
    assert not h.Q.any() and not h.H.any() and not h.eta.any()
    bh = solve_bundle(h)
    ph, _ = solve_consistency_finite(h, bh)
    lh, dh = build_decentralized_law(h, bh, ph), build_worstcase_law(h, bh, ph)
    rh = simulate(h, lh, dh, SimConfig(16, 4, record_paths=True))
    zero = max(float(np.max(np.abs(X))) for X in
               (lh.gain, lh.offset, dh.gain, dh.offset, rh.costs, rh.penalty, rh.drift))
    ok = dev <= 1e-6 and zero == 0.0
    report(9, ok, mean_deviation=dev, zero_scenario_max=zero)
    assert ok


def test_criterion_10_decomposition(example, solved):
    b, prof = solved
    rep = cost_decomposition_check(example, b, prof, seed=0, perturbations=10)
    ok = len(rep.rows) == 10 and rep.max_rel_error <= 1e-6 and rep.min_J_tilde >= -1e-10
    report(10, ok, rel_error=rep.max_rel_error, min_J_tilde=rep.min_J_tilde)
    assert ok
