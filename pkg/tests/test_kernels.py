import os
import subprocess
import sys

import numpy as np
import pytest

from robust_mflqg import _kernels
from robust_mflqg.riccati import _ptilde_coefficients, solve_structured

needs_numba = pytest.mark.skipif(_kernels.em_closed_loop_jit is None, reason="numba disabled")


@needs_numba
def test_riccati_backends_agree(example, example_bundle):
    C, D, E, F = _ptilde_coefficients(example, example_bundle.P.half_nodes(), example_bundle.K.half_nodes())
    a = solve_structured(C, D, E, F, np.zeros((1, 1)), example_bundle.grid, "backward", backend="numba")
    b = solve_structured(C, D, E, F, np.zeros((1, 1)), example_bundle.grid, "backward", backend="numpy")
    assert np.max(np.abs(a.values - b.values)) <= 1e-13
    assert np.max(np.abs(a.derivs - b.derivs)) <= 1e-12


def _em_args(rng, R=3, N=5, n=2, d=2, r=1, S=40, record=True):
    def path(*shape):
        return 0.3 * rng.standard_normal((S + 1,) + shape)
    w = np.full(S + 1, 0.01)
    return (rng.standard_normal((R, N, n)), 0.1 * rng.standard_normal((R, N, S, d)), 0.01,
            path(n, n), path(n, n), rng.standard_normal((n, d)), path(n), path(r, n), path(r),
            path(n, n), path(n), np.eye(n), 0.5 * np.eye(n), np.ones(n), np.eye(r), np.eye(n),
            np.eye(n), path(n, n), w, True, 1e10, record)


@needs_numba
def test_em_backends_agree():
    args = _em_args(np.random.default_rng(0))
    a = _kernels.em_closed_loop(*args, backend="numba")
    b = _kernels.em_closed_loop(*args, backend="numpy")
    for x, y in zip(a[:-1], b[:-1]):
        np.testing.assert_allclose(x, y, rtol=1e-12, atol=1e-13)
    assert a[-1] == b[-1] == _kernels.OK


@pytest.mark.parametrize("backend", ["numpy", pytest.param("numba", marks=needs_numba)])
def test_em_escape_flag(backend):
    args = list(_em_args(np.random.default_rng(1)))
    args[3] = np.full_like(args[3], 1e4)  # violently unstable closed loop
    assert _kernels.em_closed_loop(*args, backend=backend)[-1] == _kernels.ESCAPED


def test_env_flag_disables_jit():
    env = dict(os.environ, ROBUST_MFLQG_JIT="0")
    out = subprocess.run([sys.executable, "-c",
                          "from robust_mflqg import _kernels as k; print(k.JIT_ENABLED, k.riccati_rk4_jit)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["False", "None"]
