"""Checkable concavity certificates for the adversarial drift and an
empirical convexity probe for the control problem left after it.

Only the uniform versions are certified (Riccati existence, the
determinant test, the Hamiltonian spectrum); plain convexity has no
standalone finite test and is covered by these stronger checks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import numpy as np
from scipy.optimize import brentq

from .errors import BlowUp, NoStabilizingSolution
from .model import ValidatedModel, derived_weights
from .numerics import (
    MatrixPath,
    TimeGrid,
    eigenvalues,
    is_hurwitz,
    matrix_exponential,
)
from .riccati import RiccatiBundle, solve_P_finite, solve_P_infinite, solve_structured

DET_POSITIVE_TOL = 1e-12
DET_BISECT_TOL = 1e-6
IMAG_AXIS_TOL = 1e-9
PROBE_POSITIVE_TOL = 1e-10


class Condition(str, Enum):
    A2 = "A2"
    A2PRIME = "A2prime"
    A5 = "A5"
    A6 = "A6"
    P2PROBE = "P2probe"


@dataclass
class ConvexityReport:
    condition: Condition
    holds: bool
    witness: Any = None
    detail: float | None = None
    method: str = ""
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        def clean(v):
            if isinstance(v, (np.floating, np.integer)):
                return v.item()
            if isinstance(v, np.ndarray):
                return v.tolist()
            if isinstance(v, complex):
                return [v.real, v.imag]
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            if isinstance(v, (list, tuple)):
                return [clean(x) for x in v]
            return v

        return {
            "condition": self.condition.value,
            "method": self.method,
            "holds": bool(self.holds),
            "witness": clean(self.witness),
            "detail": clean(self.detail),
            **({"extra": clean(self.extra)} if self.extra else {}),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)


# -- finite horizon: determinant test ------------------------------------------


def hamiltonian_det_matrix(m: ValidatedModel) -> np.ndarray:
    """The ``2n x 2n`` matrix whose exponential drives the determinant test."""
    w = derived_weights(m)
    AG = m.A + m.G
    R2inv, H = m.R2inv, m.H
    top = AG + R2inv @ H
    A21 = H @ R2inv @ H + w.QIG + AG.T @ H + H @ AG
    return np.block([[top, -R2inv], [A21, -top.T]])


def det_curve(m: ValidatedModel, tau) -> np.ndarray:
    """``det[(0, I) e^{M tau} (0, I)^T]`` at each time-to-go ``tau``."""
    M = hamiltonian_det_matrix(m)
    n = m.n
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    return np.array([np.linalg.det(matrix_exponential(M * s)[n:, n:]) for s in tau])


def check_A2prime_det(m: ValidatedModel, samples: int = 1000) -> ConvexityReport:
    """Determinant test for uniform concavity in the drift.

    The determinant is a function of the time to go ``tau = T - t`` (it is
    the denominator of the Riccati solution written through the transition
    matrix of the linear Hamiltonian system). ``samples`` points cover
    ``tau`` in ``[0, T]``; the test holds iff every sample exceeds 1e-12.
    On failure, the first crossing is refined by bisection to 1e-6 and the
    witness is reported on the forward clock, ``t = T - tau``.
    """
    T = m.T
    taus = np.linspace(0.0, T, int(samples))
    dets = det_curve(m, taus)
    bad = np.nonzero(dets <= DET_POSITIVE_TOL)[0]
    if bad.size == 0:
        return ConvexityReport(Condition.A2PRIME, True, None, float(dets.min()), "determinant")
    j = int(bad[0])
    lo, hi = taus[j - 1], taus[j]

    def g(s):
        return det_curve(m, s)[0] - DET_POSITIVE_TOL

    tau_star = brentq(g, lo, hi, xtol=DET_BISECT_TOL) if g(hi) < 0 < g(lo) else hi
    return ConvexityReport(
        Condition.A2PRIME, False, float(T - tau_star), float(dets.min()), "determinant",
        extra={"tau": float(tau_star)},
    )


def check_A2prime_riccati(m: ValidatedModel, grid: TimeGrid) -> ConvexityReport:
    """Holds iff the worst-case drift Riccati exists on all of ``[0, T]``.

    ``detail`` is the smallest eigenvalue of ``-P`` seen on the computed
    interval; the witness on failure is the blow-up time.
    """
    try:
        P = solve_P_finite(m, grid)
        path: MatrixPath = P
        holds, witness = True, None
    except BlowUp as exc:
        path = exc.path
        holds, witness = False, float(exc.time)
    negP = -0.5 * (path.values + np.swapaxes(path.values, 1, 2))
    detail = float(np.min(np.linalg.eigvalsh(negP)))
    return ConvexityReport(Condition.A2PRIME, holds, witness, detail, "riccati")


# -- infinite horizon ------------------------------------------------------------


def hamiltonian_M(m: ValidatedModel) -> np.ndarray:
    n = m.n
    abar = m.A + m.G - 0.5 * m.rho * np.eye(n)
    return np.block([[abar, m.R2inv], [-derived_weights(m).QIG, -abar.T]])


def check_A6(m: ValidatedModel) -> ConvexityReport:
    M = m.A + m.G - 0.5 * m.rho * np.eye(m.n)
    eigs = eigenvalues(M)
    worst = eigs[np.argmax(eigs.real)]
    holds = bool(worst.real < 0.0)
    return ConvexityReport(Condition.A6, holds, None if holds else complex(worst),
                           float(worst.real), "hurwitz")


def check_infinite_convexity(m: ValidatedModel) -> ConvexityReport:
    """Uniform concavity in the drift on an infinite horizon.

    Requires ``A + G - rho/2 I`` Hurwitz, no eigenvalue of the Hamiltonian
    ``M`` within 1e-9 of the imaginary axis, and a stabilizing ARE solution.
    ``detail`` is ``min |Re lambda(M)|``.
    """
    a6 = check_A6(m)
    eigs = eigenvalues(hamiltonian_M(m))
    k = int(np.argmin(np.abs(eigs.real)))
    gap = float(abs(eigs[k].real))
    extra = {"A6_holds": a6.holds, "A6_abscissa": a6.detail,
             "eigenvalues": [[float(e.real), float(e.imag)] for e in eigs]}
    if not a6.holds:
        return ConvexityReport(Condition.A5, False, a6.witness, gap, "hamiltonian", extra)
    if gap <= IMAG_AXIS_TOL:
        return ConvexityReport(Condition.A5, False, complex(eigs[k]), gap, "hamiltonian", extra)
    try:
        solve_P_infinite(m)
    except NoStabilizingSolution as exc:
        extra["error"] = str(exc)
        return ConvexityReport(Condition.A5, False, complex(eigs[k]), gap, "hamiltonian", extra)
    return ConvexityReport(Condition.A5, True, None, gap, "hamiltonian", extra)


# -- convexity probe for the control problem ---------------------------------------


def random_direction(rng: np.random.Generator, grid: TimeGrid, dim: int, knots: int = 12) -> np.ndarray:
    """Piecewise-linear profile on ``grid`` with unit ``L2`` norm (trapezoid)."""
    kt = np.linspace(grid.t0, grid.t1, knots + 1)
    vals = rng.standard_normal((knots + 1, dim))
    t = grid.nodes
    prof = np.stack([np.interp(t, kt, vals[:, j]) for j in range(dim)], axis=1)
    return prof / l2_norm(prof, grid)


def trapezoid_weights(grid: TimeGrid) -> np.ndarray:
    w = np.full(grid.steps + 1, grid.h)
    w[0] = w[-1] = 0.5 * grid.h
    return w


def l2_norm(prof: np.ndarray, grid: TimeGrid) -> float:
    return float(np.sqrt(np.sum(trapezoid_weights(grid) * np.sum(prof * prof, axis=1))))


def _half_nodes_linear(prof: np.ndarray) -> np.ndarray:
    out = np.empty((2 * len(prof) - 1,) + prof.shape[1:])
    out[0::2] = prof
    out[1::2] = 0.5 * (prof[:-1] + prof[1:])
    return out


def second_variation(m: ValidatedModel, bundle: RiccatiBundle, u_dir: np.ndarray) -> float:
    """Per-agent second variation of the control problem in the symmetric
    large-population reduction.

    All agents deviate by the same piecewise-linear ``u_dir``, so the state
    and adjoint deviations obey

        y' = (A + Gbar) y + B u - R2^-1 s,  y(0) = 0
        s' = -[(A + Gbar)^T s + P B u],     s(T) = 0

    and the value is
    ``1/2 int (|(I-Gamma) y|_Q^2 + |u|_R1^2 - |P y + s|_{R2^-1}^2) dt + 1/2 |y(T)|_H^2``.
    """
    grid = bundle.grid
    n = m.n
    P = bundle.P
    Ph = P.half_nodes()
    Gbar_h = m.G - m.R2inv @ Ph
    AGb = m.A + Gbar_h
    uh = _half_nodes_linear(u_dir)
    Bu = uh @ m.B.T  # (2S+1, n)
    # backward s: s' = -(A+Gbar)^T s - P B u
    Cs = -(Ph @ Bu[..., None])
    s = solve_structured(Cs, -np.swapaxes(AGb, 1, 2), np.zeros((1, 1)), np.zeros((1, n)),
                         np.zeros((n, 1)), grid, "backward", quad=False)
    # forward y with s interpolated by Hermite
    sh = s.half_nodes()
    Cy = Bu[..., None] - m.R2inv @ sh
    y = solve_structured(Cy, AGb, np.zeros((1, 1)), np.zeros((1, n)),
                         np.zeros((n, 1)), grid, "forward", quad=False)
    yv, sv = y.values[..., 0], s.values[..., 0]
    w = derived_weights(m)
    e = np.einsum("ij,kj->ki", w.QIG, yv)
    q = np.sum(yv * e, axis=1)
    uu = np.einsum("ki,ij,kj->k", u_dir, m.R1, u_dir)
    z = np.einsum("kij,kj->ki", P.values, yv) + sv
    ff = np.einsum("ki,ij,kj->k", z, m.R2inv, z)
    wt = trapezoid_weights(grid)
    yT = yv[-1]
    return float(0.5 * np.sum(wt * (q + uu - ff)) + 0.5 * yT @ m.H @ yT)


def probe_P2_convexity(m: ValidatedModel, bundle: RiccatiBundle, directions: int = 64,
                       seed: int = 0) -> ConvexityReport:
    """Evaluate the second variation on seeded random unit directions.

    Holds iff every value is at least 1e-10. This is evidence of convexity
    for the given weights, not a proof; ``detail`` is the smallest value and
    on failure the witness is the index of the worst direction.
    """
    if not bundle.finite:
        raise ValueError("the probe needs a finite-horizon bundle")
    values = np.empty(int(directions))
    for j in range(int(directions)):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(j,)))
        values[j] = second_variation(m, bundle, random_direction(rng, bundle.grid, m.r))
    k = int(np.argmin(values))
    holds = bool(values[k] >= PROBE_POSITIVE_TOL)
    return ConvexityReport(Condition.P2PROBE, holds, None if holds else {"direction": k},
                           float(values[k]), "probe", extra={"values": values})


def check_all(m: ValidatedModel, grid: TimeGrid | None = None, samples: int = 1000) -> list[ConvexityReport]:
    """Every certificate applicable to ``m``'s horizon."""
    if m.horizon.finite:
        grid = grid or TimeGrid(0.0, m.T, 2000)
        return [check_A2prime_det(m, samples), check_A2prime_riccati(m, grid)]
    return [check_A6(m), check_infinite_convexity(m)]
