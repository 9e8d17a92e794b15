"""Small-N ground truth built on the full stacked system.

Everything here works with the ``nN``-dimensional state
``X = (x_1, ..., x_N)`` and never uses the mean-field reduction, so it can
check the decentralized pipeline independently.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import expm

from .consistency import ConsistencyProfile
from .control import build_decentralized_law, build_worstcase_law, synthesized_open_loop
from .convexity import random_direction, trapezoid_weights
from .errors import BadHorizon, BlowUp, NotConcave, TooLarge
from .model import ValidatedModel, derived_weights
from .numerics import DEFAULT_BLOWUP_NORM, MatrixPath, TimeGrid, symmetrize
from .riccati import RiccatiBundle, solve_care_stabilizing, solve_structured

log = logging.getLogger(__name__)

MAX_STACKED_DIM = 512
MAX_MINIMAX_DIM = 256
CG_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class StackedSystem:
    """Stacked matrices of the N-agent problem with a common drift ``f``.

    ``R_joint`` weighs the joint channel ``(u_1, ..., u_N, f)``; the drift
    is penalized once per agent, hence ``-N R2``.
    """

    N: int
    n: int
    A_check: np.ndarray
    B_stack: np.ndarray
    F_stack: np.ndarray
    Q_hat: np.ndarray
    H_stack: np.ndarray
    eta_hat: np.ndarray
    R_joint: np.ndarray
    const: float  # N eta^T Q eta, the constant of the tracking cost

    @property
    def dim(self) -> int:
        return self.N * self.n

    def aggregate(self, X: np.ndarray) -> np.ndarray:
        """``(1/N) (1^T (x) I) X (1 (x) I)``."""
        return self.F_stack.T @ X @ self.F_stack / self.N

    def aggregation_error(self, m: ValidatedModel) -> float:
        IG = np.eye(self.n) - m.Gamma
        return float(np.max(np.abs(self.aggregate(self.Q_hat) - IG.T @ m.Q @ IG)))


def build_stacked(m: ValidatedModel, N: int) -> StackedSystem:
    """Raises :class:`TooLarge` when ``nN > 512``."""
    N = int(N)
    if N < 1:
        raise ValueError("N must be positive")
    n = m.n
    if n * N > MAX_STACKED_DIM:
        raise TooLarge(f"stacked dimension {n * N} exceeds {MAX_STACKED_DIM}")
    w = derived_weights(m)
    I_N = np.eye(N)
    J = np.ones((N, N)) / N
    one = np.ones((N, 1))
    Q_hat = symmetrize(np.kron(I_N, m.Q) - np.kron(J, w.Psi))
    R_joint = np.zeros((N * m.r + n, N * m.r + n))
    R_joint[:N * m.r, :N * m.r] = np.kron(I_N, m.R1)
    R_joint[N * m.r:, N * m.r:] = -N * m.R2
    return StackedSystem(
        N=N, n=n,
        A_check=np.kron(I_N, m.A) + np.kron(J, m.G),
        B_stack=np.kron(I_N, m.B),
        F_stack=np.kron(one, np.eye(n)),
        Q_hat=Q_hat,
        H_stack=np.kron(I_N, m.H),
        eta_hat=np.kron(one[:, 0], w.eta_bar),
        R_joint=R_joint,
        const=float(N * m.eta @ m.Q @ m.eta),
    )


# -- deterministic social cost with a given drift ----------------------------------


def _half_linear(prof: np.ndarray) -> np.ndarray:
    out = np.empty((2 * len(prof) - 1,) + prof.shape[1:])
    out[0::2] = prof
    out[1::2] = 0.5 * (prof[:-1] + prof[1:])
    return out


def social_cost_given_drift(m: ValidatedModel, st: StackedSystem, grid: TimeGrid,
                            u: np.ndarray, f: np.ndarray, x0: np.ndarray) -> float:
    """Noise-free social cost with node profiles ``u[k, i]`` and ``f[k]``
    (linear in between): RK4 for the stacked state, trapezoid rule for
    the running cost."""
    N, n = st.N, st.n
    v = (u @ m.B.T).reshape(len(u), N * n) + np.tile(f, (1, N))
    X = solve_structured(_half_linear(v)[..., None], st.A_check, np.zeros((1, 1)),
                         np.zeros((1, N * n)), np.asarray(x0, float).reshape(-1, 1),
                         grid, "forward", quad=False).values[..., 0]
    w = trapezoid_weights(grid)
    run = (np.einsum("ki,ij,kj->k", X, st.Q_hat, X) - 2 * X @ st.eta_hat + st.const
           + np.einsum("kai,ij,kaj->k", u, m.R1, u)
           - N * np.einsum("ki,ij,kj->k", f, m.R2, f))
    return float(0.5 * np.sum(w * run) + 0.5 * X[-1] @ st.H_stack @ X[-1])


# -- brute-force worst-case drift --------------------------------------------------


@dataclass(eq=False)
class BruteForceResult:
    grid: TimeGrid
    f: np.ndarray  # (nodes, n)
    value: float
    iterations: int
    grad_norm: float


class _FOHSystem:
    """Exact discretization of ``X' = A X + v`` for piecewise-linear ``v``:
    ``X_{k+1} = Phi X_k + Ga v_k + Gb v_{k+1}``."""

    def __init__(self, A: np.ndarray, h: float):
        d = A.shape[0]
        M = np.zeros((3 * d, 3 * d))
        M[:d, :d] = A * h
        M[:d, d:2 * d] = np.eye(d) * h
        M[d:2 * d, 2 * d:] = np.eye(d)
        E = expm(M)
        self.Phi = E[:d, :d]
        psi1, psi2 = E[:d, d:2 * d], E[:d, 2 * d:]
        self.Ga = psi1 - psi2
        self.Gb = psi2

    def forward(self, x0: np.ndarray, V: np.ndarray) -> np.ndarray:
        X = np.empty((len(V), len(x0)))
        X[0] = x0
        for k in range(len(V) - 1):
            X[k + 1] = self.Phi @ X[k] + self.Ga @ V[k] + self.Gb @ V[k + 1]
        return X

    def adjoint(self, g: np.ndarray, terminal: np.ndarray) -> np.ndarray:
        """``dJ/dV`` given node gradients ``g[k] = dJ/dX_k`` (explicit part)
        with ``terminal`` added at the last node."""
        K = len(g) - 1
        lam = np.empty_like(g)
        lam[K] = g[K] + terminal
        for k in range(K - 1, -1, -1):
            lam[k] = g[k] + self.Phi.T @ lam[k + 1]
        dV = np.zeros_like(g)
        dV[:K] += lam[1:] @ self.Ga
        dV[1:] += lam[1:] @ self.Gb
        return dV


def bruteforce_worstcase_drift(m: ValidatedModel, u: np.ndarray, grid: TimeGrid,
                               x0: np.ndarray | None = None, tol: float = CG_TOL,
                               maxiter: int | None = None) -> BruteForceResult:
    """Maximize the noise-free social cost over node values of ``f`` for the
    fixed control profile ``u[k, i]``.

    The state map is discretized exactly for piecewise-linear inputs and
    the cost by the trapezoid rule, so ``f -> J`` is a finite-dimensional
    quadratic. Its stationarity system is solved by preconditioned conjugate
    gradients on ``-J`` until the ``L2`` norm of the gradient is below
    ``tol``.

    Raises
    ------
    NotConcave
        On non-negative curvature along a CG direction.
    """
    if not m.horizon.finite:
        raise BadHorizon("the brute-force drift needs a finite horizon")
    N = u.shape[1]
    st = build_stacked(m, N)
    n, d = m.n, st.dim
    x0 = np.tile(m.xbar0, N) if x0 is None else np.asarray(x0, float).reshape(d)
    sys = _FOHSystem(st.A_check, grid.h)
    w = trapezoid_weights(grid)
    Bu = (u @ m.B.T).reshape(len(u), d)
    NR2 = N * m.R2
    NR2inv = np.linalg.inv(NR2)

    def grad(f, affine=True):
        V = (Bu if affine else 0.0) + np.tile(f, (1, N))
        X = sys.forward(x0 if affine else np.zeros(d), V)
        g = w[:, None] * (X @ st.Q_hat - (st.eta_hat if affine else 0.0))
        dV = sys.adjoint(g, X[-1] @ st.H_stack)
        dF = dV.reshape(len(V), N, n).sum(axis=1)
        return dF - w[:, None] * (f @ NR2)

    def norm(g):
        return float(np.sqrt(np.sum(g * g / w[:, None])))

    def precond(g):
        return (g / w[:, None]) @ NR2inv

    f = np.zeros((len(w), n))
    r = grad(f)  # residual of the stationarity system (the gradient of J)
    z = precond(r)
    p = z.copy()
    rz = np.sum(r * z)
    it = 0
    maxiter = maxiter or 10 * len(w) * n
    while norm(r) > tol and it < maxiter:
        Hp = -grad(p, affine=False)  # Hessian of -J applied to p
        curv = np.sum(p * Hp)
        if curv <= 0.0:
            raise NotConcave(f"non-positive curvature {curv:.3e} of -J at CG iteration {it}")
        a = rz / curv
        f = f + a * p
        r = r - a * Hp
        z = precond(r)
        rz_new = np.sum(r * z)
        p = z + (rz_new / rz) * p
        rz = rz_new
        it += 1
    r = grad(f)
    value = _discrete_value(m, st, sys, w, Bu, u, f, x0)
    return BruteForceResult(grid, f, value, it, norm(r))


def _discrete_value(m, st, sys, w, Bu, u, f, x0) -> float:
    X = sys.forward(x0, Bu + np.tile(f, (1, st.N)))
    run = (np.einsum("ki,ij,kj->k", X, st.Q_hat, X) - 2 * X @ st.eta_hat + st.const
           + np.einsum("kai,ij,kaj->k", u, m.R1, u)
           - st.N * np.einsum("ki,ij,kj->k", f, m.R2, f))
    return float(0.5 * np.sum(w * run) + 0.5 * X[-1] @ st.H_stack @ X[-1])


@dataclass
class DriftAgreement:
    max_node_error: float
    bruteforce: BruteForceResult
    law_drift: np.ndarray


def compare_worstcase_drift(m: ValidatedModel, bundle: RiccatiBundle, profile: ConsistencyProfile,
                            N: int = 1) -> DriftAgreement:
    """Brute-force maximizer for the synthesized open-loop control against
    the drift law on the mean path."""
    law = build_decentralized_law(m, bundle, profile)
    drift = build_worstcase_law(m, bundle, profile)
    u = synthesized_open_loop(m, law, profile, N)
    bf = bruteforce_worstcase_drift(m, u, bundle.grid)
    ref = drift.deterministic()
    return DriftAgreement(float(np.max(np.abs(bf.f - ref))), bf, ref)


@dataclass
class StationarityReport:
    derivatives: list
    norms: list

    @property
    def max_ratio(self) -> float:
        return max(abs(d) / nrm for d, nrm in zip(self.derivatives, self.norms))


def gateaux_stationarity(m: ValidatedModel, bundle: RiccatiBundle, profile: ConsistencyProfile,
                         directions: int = 10, seed: int = 0, N: int = 1,
                         eps: float = 1.0) -> StationarityReport:
    """Central-difference derivatives of the per-agent social cost with
    respect to ``f`` at the drift law's noise-free path, for fixed
    synthesized controls. The cost is quadratic in ``f``, so the central
    difference is exact for any ``eps``."""
    grid = bundle.grid
    st = build_stacked(m, N)
    law = build_decentralized_law(m, bundle, profile)
    f0 = build_worstcase_law(m, bundle, profile).deterministic()
    u = synthesized_open_loop(m, law, profile, N)
    x0 = np.tile(m.xbar0, N)
    ders, norms = [], []
    for j in range(directions):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(j,)))
        dirn = random_direction(rng, grid, m.n)
        jp = social_cost_given_drift(m, st, grid, u, f0 + eps * dirn, x0)
        jm = social_cost_given_drift(m, st, grid, u, f0 - eps * dirn, x0)
        ders.append((jp - jm) / (2 * eps) / N)
        norms.append(1.0)  # directions have unit L2 norm
    return StationarityReport(ders, norms)


# -- stacked LQ values ---------------------------------------------------------------


def _simpson(vals: np.ndarray, h: float) -> float:
    """Composite Simpson on half-node samples ``vals[0..2S]``."""
    return float(h / 6.0 * (vals[0:-1:2].sum() + 4 * vals[1::2].sum() + vals[2::2].sum()))


@dataclass(eq=False)
class LQValue:
    """``V(0, X) = 1/2 X^T Pi X + xi^T X + c0`` and its expectation over the
    i.i.d. initial law."""

    Pi: MatrixPath
    xi: MatrixPath
    c0: float
    value: float


def _lq_value(grid: TimeGrid, A_half: np.ndarray, Qc_half: np.ndarray, q_half: np.ndarray,
              b_half: np.ndarray, c_half: np.ndarray, Sgain: np.ndarray, H: np.ndarray,
              noise: np.ndarray, mean0: np.ndarray, var0: float, what: str) -> LQValue:
    """Value of ``1/2 int (X^T Qc X + 2 q^T X + c) dt + 1/2 X(T)^T H X(T)``
    under ``dX = (A X + b + Bc w) dt + noise dW`` optimized over the channel
    ``w`` with ``Sgain = Bc Rc^-1 Bc^T``. Half-node inputs have leading
    length ``2 steps + 1``."""
    d = A_half.shape[-1]
    Pi = solve_structured(-Qc_half, -np.swapaxes(A_half, -1, -2), A_half, -Sgain, H, grid,
                          "backward")
    if not Pi.complete:
        raise BlowUp(what, Pi.blowup_time, Pi)
    Pih = Pi.half_nodes()
    Acl = A_half - Sgain @ Pih
    Cx = -(q_half[..., None] + Pih @ b_half[..., None])
    xi = solve_structured(Cx, -np.swapaxes(Acl, -1, -2), np.zeros((1, 1)), np.zeros((1, d)),
                          np.zeros((d, 1)), grid, "backward", quad=False)
    xih = xi.half_nodes()[..., 0]
    NN = noise @ noise.T
    dc = (0.5 * c_half + np.einsum("ki,ki->k", xih, b_half)
          - 0.5 * np.einsum("ki,ij,kj->k", xih, Sgain, xih)
          + 0.5 * np.einsum("ij,kji->k", NN, Pih))
    c0 = _simpson(dc, grid.h)
    P0, x0 = Pi.values[0], xi.values[0, :, 0]
    value = 0.5 * mean0 @ P0 @ mean0 + 0.5 * var0 * np.trace(P0) + x0 @ mean0 + c0
    return LQValue(Pi, xi, c0, float(value))


def _require_finite(m: ValidatedModel) -> None:
    if not m.horizon.finite:
        raise BadHorizon("stacked LQ values need a finite horizon")


def solve_centralized_minimax(m: ValidatedModel, N: int, grid: TimeGrid) -> LQValue:
    """Inf-sup social cost when one planner chooses every control from the
    full state and the drift responds from the full state.

    Joint saddle Riccati for the channel ``(u, f)`` with weight
    ``diag(I (x) R1, -N R2)``, plus the affine offset and the noise and
    initial-spread constants.

    Raises
    ------
    BlowUp
        If the saddle Riccati escapes (no saddle point for this N).
    """
    _require_finite(m)
    st = build_stacked(m, N)
    d = st.dim
    if d > MAX_MINIMAX_DIM:
        raise TooLarge(f"stacked dimension {d} exceeds {MAX_MINIMAX_DIM}")
    Bc = np.hstack([st.B_stack, st.F_stack])
    Sgain = symmetrize(Bc @ np.linalg.solve(st.R_joint, Bc.T))
    H2 = 2 * grid.steps + 1
    one = np.ones((H2, 1))
    return _lq_value(
        grid, st.A_check[None], st.Q_hat[None], (-st.eta_hat)[None], np.zeros((1, d)),
        st.const * one[:, 0], Sgain, st.H_stack, np.kron(np.eye(N), m.sigma),
        np.tile(m.xbar0, N), m.init_spread ** 2, "centralized minimax Riccati")


def decentralized_worstcase_value(m: ValidatedModel, bundle: RiccatiBundle,
                                  profile: ConsistencyProfile, N: int) -> LQValue:
    """Social cost of the decentralized feedback laws against the drift that
    maximizes it with full-state information."""
    _require_finite(m)
    grid = bundle.grid
    st = build_stacked(m, N)
    n, d = m.n, st.dim
    Kh = bundle.K.half_nodes()
    Ph = bundle.P.half_nodes()
    gain = -(m.R1inv @ m.B.T) @ Kh  # (H2, r, n)
    hs = profile.half_nodes(m, bundle)
    l_h, phi_h = hs[:, n:2 * n], hs[:, 3 * n:4 * n]
    off = -(phi_h - np.einsum("kij,kj->ki", Ph, l_h)) @ (m.R1inv @ m.B.T).T
    I_N = np.eye(N)
    A_half = st.A_check[None] + np.einsum("ab,kij->kaibj", I_N, m.B @ gain).reshape(-1, d, d)
    uQ = np.einsum("kri,rs,ksj->kij", gain, m.R1, gain)
    Qc = st.Q_hat[None] + np.einsum("ab,kij->kaibj", I_N, uQ).reshape(-1, d, d)
    q = -st.eta_hat[None] + np.tile(np.einsum("kri,rs,ks->ki", gain, m.R1, off), (1, N))
    b = np.tile(off @ m.B.T, (1, N))
    c = st.const + N * np.einsum("kr,rs,ks->k", off, m.R1, off)
    Sgain = symmetrize(st.F_stack @ np.linalg.solve(-N * m.R2, st.F_stack.T))
    return _lq_value(grid, A_half, Qc, q, b, c, Sgain, st.H_stack, np.kron(I_N, m.sigma),
                     np.tile(m.xbar0, N), m.init_spread ** 2, "decentralized worst-case Riccati")


@dataclass
class GapRow:
    N: int
    centralized: float
    decentralized: float

    @property
    def gap(self) -> float:
        return self.decentralized - self.centralized

    @property
    def gap_sqrtN(self) -> float:
        return self.gap * np.sqrt(self.N)


@dataclass
class GapTable:
    rows: list = field(default_factory=list)
    tol: float = 1e-8

    @property
    def nonnegative(self) -> bool:
        return all(r.gap >= -self.tol for r in self.rows)

    @property
    def nonincreasing(self) -> bool:
        g = [r.gap for r in self.rows]
        return all(b <= a + self.tol for a, b in zip(g, g[1:]))

    @property
    def sqrtN_ratio(self) -> float:
        v = [r.gap_sqrtN for r in self.rows]
        if min(v) <= 0:
            return float("inf") if max(v) > 0 else 1.0
        return max(v) / min(v)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["N", "centralized_value", "decentralized_value", "gap", "gap_times_sqrtN"])
            for r in self.rows:
                wr.writerow([r.N] + [f"{x:.17g}" for x in
                                     (r.centralized, r.decentralized, r.gap, r.gap_sqrtN)])


def optimality_gap_sweep(m: ValidatedModel, bundle: RiccatiBundle, profile: ConsistencyProfile,
                         Ns) -> GapTable:
    """Per-agent gap between the decentralized worst-case cost and the
    centralized inf-sup value for each ``N``; both sides are computed from
    Riccati equations, without Monte Carlo."""
    table = GapTable()
    for N in Ns:
        N = int(N)
        cen = solve_centralized_minimax(m, N, bundle.grid).value / N
        dec = decentralized_worstcase_value(m, bundle, profile, N).value / N
        log.info("N=%d: centralized %.10g, decentralized %.10g", N, cen, dec)
        table.rows.append(GapRow(N, cen, dec))
    return table


# -- infinite horizon aggregation ------------------------------------------------------


def aggregate_stacked_are(m: ValidatedModel, N: int) -> np.ndarray:
    """Stabilizing solution of the stacked worst-case-drift ARE, aggregated
    to ``n x n`` by ``(1/N) (1^T (x) I) X (1 (x) I)``.

    Raises
    ------
    NoStabilizingSolution
    """
    if m.horizon.finite:
        raise BadHorizon("the stacked ARE is an infinite-horizon object")
    st = build_stacked(m, N)
    a = st.A_check - 0.5 * m.rho * np.eye(st.dim)
    S = st.F_stack @ np.linalg.solve(N * m.R2, st.F_stack.T)
    X = solve_care_stabilizing(a, S, -st.Q_hat, "stacked worst-case drift ARE")
    return st.aggregate(X)


__all__ = [
    "StackedSystem", "build_stacked", "social_cost_given_drift", "BruteForceResult",
    "bruteforce_worstcase_drift", "compare_worstcase_drift", "gateaux_stationarity",
    "StationarityReport", "LQValue", "solve_centralized_minimax",
    "decentralized_worstcase_value", "GapRow", "GapTable", "optimality_gap_sweep",
    "aggregate_stacked_are", "DEFAULT_BLOWUP_NORM",
]
