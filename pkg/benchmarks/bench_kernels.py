"""Compare the compiled and pure-numpy kernels on the worked example.

    python3 benchmarks/bench_kernels.py [--repeat 5]

The first compiled call is timed separately (compilation or cache load).
Both backends must agree to rounding; the script exits non-zero otherwise.
"""

import argparse
import sys
import time

import numpy as np

from robust_mflqg import _kernels
from robust_mflqg.consistency import solve_consistency
from robust_mflqg.control import SimConfig, build_decentralized_law, build_worstcase_law, simulate
from robust_mflqg.model import load_scenario, shipped_scenario, validate_params
from robust_mflqg.riccati import default_grid, solve_bundle, _ptilde_coefficients, solve_structured


def _em_inputs(m, law, drift, rng, R, N, S, h):
    """Kernel arguments with fixed noise, mirroring what simulate builds."""
    K, P, Pt = law.K, law.P, drift.Ptilde
    Abar = m.A - m.S @ K
    L = m.G - m.R2inv @ P - m.R2inv @ Pt
    w = np.full(S + 1, h)
    w[0] = w[-1] = 0.5 * h
    delta0 = 0.3 * rng.standard_normal((R, N, m.n))
    dW = np.sqrt(h) * rng.standard_normal((R, N, S, m.d))
    return (delta0, dW, h, Abar, L, m.sigma, drift.xbar, law.gain, law.offset, drift.gain,
            drift.offset, m.Q, m.Gamma, m.eta, m.R1, m.R2, m.H, Pt, w, True, 1e10, False)


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--N", type=int, default=64)
    ap.add_argument("--replications", type=int, default=64)
    args = ap.parse_args()
    if not _kernels.HAVE_NUMBA:
        print("numba is not installed; only the numpy backend is available")
        return 0

    m = validate_params(load_scenario(shipped_scenario("paper_example")))
    grid = default_grid(m, 2000)
    b = solve_bundle(m, grid)
    prof, _ = solve_consistency(m, b)
    law, drift = build_decentralized_law(m, b, prof), build_worstcase_law(m, b, prof)
    C, D, E, F = _ptilde_coefficients(m, b.P.half_nodes(), b.K.half_nodes())

    def ric(backend):
        return lambda: solve_structured(C, D, E, F, np.zeros((1, 1)), grid, "backward",
                                        backend=backend).values

    R, N, S = args.replications, args.N, grid.steps
    rng = np.random.default_rng(0)
    em_args = _em_inputs(m, law, drift, rng, R, N, S, grid.h)

    def em(backend):
        return lambda: _kernels.em_closed_loop(*em_args, backend=backend)[0]

    def sim(backend):
        cfg = SimConfig(args.N, args.replications, seed=1, backend=backend)
        return lambda: simulate(m, law, drift, cfg).costs

    ok = True
    for name, make in (("riccati rk4", ric), ("em kernel", em), ("simulate", sim)):
        t0 = time.perf_counter()
        make("numba")()
        first = time.perf_counter() - t0
        tj, oj = best_of(make("numba"), args.repeat)
        tn, on = best_of(make("numpy"), args.repeat)
        diff = float(np.max(np.abs(oj - on)))
        ok &= diff <= 1e-10 * max(1.0, float(np.max(np.abs(on))))
        print(f"{name:12s} numba {tj * 1e3:9.2f} ms (first call {first * 1e3:8.1f} ms)  "
              f"numpy {tn * 1e3:9.2f} ms  speedup {tn / tj:6.1f}x  max diff {diff:.1e}")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
