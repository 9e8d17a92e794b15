"""End-to-end verification of the worked scalar example, one check per
reproducible claim. Used by the ``verify-paper-example`` command."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .consistency import (
    boundary_errors,
    consistency_residual,
    detect_Z_blowup,
    solve_consistency_finite,
    solve_consistency_finite_shooting,
    v_identity_error,
)
from .control import (
    SimConfig,
    build_decentralized_law,
    build_worstcase_law,
    cost_decomposition_check,
    meanfield_error_sweep,
    simulate,
)
from .convexity import check_A2prime_det, check_A2prime_riccati
from .model import ValidatedModel, load_scenario, shipped_scenario, validate_params
from .oracle import aggregate_stacked_are, compare_worstcase_drift, gateaux_stationarity, optimality_gap_sweep
from .riccati import closed_loop_abscissa, default_grid, solve_bundle, solve_P_finite, solve_P_infinite


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: dict
    seconds: float

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: " + ", ".join(
            f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in self.detail.items())


def _load(name: str) -> ValidatedModel:
    return validate_params(load_scenario(shipped_scenario(name)))


def _timed(name, fn) -> CheckResult:
    t0 = time.perf_counter()
    passed, detail = fn()
    return CheckResult(name, bool(passed), detail, time.perf_counter() - t0)


def check_riccati_closed_form(m: ValidatedModel):
    grid = default_grid(m, 2000)
    P = solve_P_finite(m, grid)
    err = float(np.max(np.abs(P.values[:, 0, 0] - (-1.0 / (grid.nodes + 1.0) - 0.5))))
    return err <= 1e-8, {"max_error": err}


def check_z_blowup(m: ValidatedModel):
    b = solve_bundle(m)
    z = detect_Z_blowup(m, b)
    early = detect_Z_blowup(m, b, t_end=0.7)
    ok = z.time is not None and abs(z.time - 0.758276) <= 5e-3 and early.time is None
    return ok, {"time": z.time, "blowup_before_0.7": early.time is not None}


def check_certificates(m: ValidatedModel, failing: ValidatedModel):
    grid = default_grid(m)
    ok_hold = check_A2prime_det(m).holds and check_A2prime_riccati(m, grid).holds
    gf = default_grid(failing)
    d, r = check_A2prime_det(failing), check_A2prime_riccati(failing, gf)
    close = (not d.holds and not r.holds and abs(d.witness - r.witness) <= 2 * gf.h)
    return ok_hold and close, {"det_witness": d.witness, "riccati_witness": r.witness}


def check_consistency(m: ValidatedModel):
    b = solve_bundle(m)
    y, _ = solve_consistency_finite(m, b)
    s = solve_consistency_finite_shooting(m, b)
    diff = float(np.max(np.abs(y.state - s.state)))
    bc = max(boundary_errors(y, m).values())
    v = v_identity_error(y, b)
    res = float(np.max(np.abs(consistency_residual(y, m, b))))
    return diff <= 1e-6 and bc <= 1e-8 and v <= 1e-8 and res <= 1e-5, {
        "route_gap": diff, "boundary": float(bc), "v_identity": v, "residual": res}


def check_drift_oracle(m: ValidatedModel):
    b = solve_bundle(m)
    prof, _ = solve_consistency_finite(m, b)
    ag = compare_worstcase_drift(m, b, prof)
    st = gateaux_stationarity(m, b, prof, directions=10)
    return ag.max_node_error <= 1e-4 and st.max_ratio <= 1e-6, {
        "node_error": ag.max_node_error, "gateaux": st.max_ratio}


def check_rate(m: ValidatedModel, replications: int = 512, seed: int = 0):
    b = solve_bundle(m)
    prof, _ = solve_consistency_finite(m, b)
    rep = meanfield_error_sweep(m, build_decentralized_law(m, b, prof),
                                build_worstcase_law(m, b, prof), [8, 16, 32, 64, 128],
                                replications, seed)
    return rep.slope_in(), {"slope": rep.slope}


def check_gap(m: ValidatedModel):
    b = solve_bundle(m)
    prof, _ = solve_consistency_finite(m, b)
    tab = optimality_gap_sweep(m, b, prof, [2, 4, 8])
    ok = tab.nonnegative and tab.nonincreasing and tab.sqrtN_ratio <= 3.0
    return ok, {"gaps": [r.gap for r in tab.rows], "sqrtN_ratio": tab.sqrtN_ratio}


def check_infinite(mi: ValidatedModel):
    P = solve_P_infinite(mi)
    err = float(abs(P[0, 0] - (-4.0 + np.sqrt(15.0))))
    agg = float(np.max(np.abs(aggregate_stacked_are(mi, 5) - P)))
    hurwitz = closed_loop_abscissa(mi, P) < 0
    return err <= 1e-10 and agg <= 1e-8 and hurwitz, {"root_error": err, "aggregate_error": agg}


def check_degenerate(m: ValidatedModel, homogeneous: ValidatedModel):
    md = m.replace(sigma=np.zeros_like(m.sigma), init_spread=0.0)
    b = solve_bundle(md)
    prof, _ = solve_consistency_finite(md, b)
    law, dr = build_decentralized_law(md, b, prof), build_worstcase_law(md, b, prof)
    res = simulate(md, law, dr, SimConfig(8, 2, record_paths=True))
    dev = float(np.max(np.abs(res.xhat - prof.xbar[None])))
    bh = solve_bundle(homogeneous)
    ph, _ = solve_consistency_finite(homogeneous, bh)
    lh, dh = build_decentralized_law(homogeneous, bh, ph), build_worstcase_law(homogeneous, bh, ph)
    hz = homogeneous.replace(sigma=np.zeros_like(homogeneous.sigma), init_spread=0.0)
    rh = simulate(hz, lh, dh, SimConfig(8, 2, record_paths=True))
    zero = max(float(np.max(np.abs(lh.gain))), float(np.max(np.abs(lh.offset))),
               float(np.max(np.abs(dh.gain))), float(np.max(np.abs(dh.offset))),
               float(np.max(np.abs(rh.costs))), float(np.max(np.abs(rh.drift))))
    return dev <= 1e-6 and zero == 0.0, {"mean_deviation": dev, "zero_scenario_max": zero}


def check_decomposition(m: ValidatedModel):
    b = solve_bundle(m)
    prof, _ = solve_consistency_finite(m, b)
    rep = cost_decomposition_check(m, b, prof, seed=0, perturbations=10)
    return rep.max_rel_error <= 1e-6 and rep.min_J_tilde >= -1e-10, {
        "rel_error": rep.max_rel_error, "min_J_tilde": rep.min_J_tilde}


def run_all(include_rate: bool = True, seed: int = 0) -> list[CheckResult]:
    m = _load("paper_example")
    checks = [
        ("riccati closed form", lambda: check_riccati_closed_form(m)),
        ("Z blow-up time", lambda: check_z_blowup(m)),
        ("drift concavity certificates", lambda: check_certificates(m, _load("blowup_case"))),
        ("consistency routes and identities", lambda: check_consistency(m)),
        ("worst-case drift oracle", lambda: check_drift_oracle(m)),
    ]
    if include_rate:
        checks.append(("mean-field rate", lambda: check_rate(m, seed=seed)))
    checks += [
        ("optimality gap rate", lambda: check_gap(m)),
        ("infinite-horizon ARE", lambda: check_infinite(_load("scalar_infinite"))),
        ("degenerate exactness", lambda: check_degenerate(m, _load("homogeneous"))),
        ("cost decomposition", lambda: check_decomposition(m)),
    ]
    return [_timed(name, fn) for name, fn in checks]
