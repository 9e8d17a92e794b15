"""Decentralized control law, realized worst-case drift, closed-loop
simulation and cost bookkeeping.

Agent ``i`` applies ``u_i = -R1^-1 B^T (K x_i - P l + phi)``. Along that
closed loop the worst-case drift is
``f = -R2^-1 (P x_hat + Ptilde (x_hat - xbar) + sbar)`` where ``x_hat`` is the
population average (agent ``i`` included).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_continuous_lyapunov

from . import _kernels
from .consistency import ConsistencyProfile
from .convexity import random_direction, trapezoid_weights
from .errors import GridMismatch, MissingPtilde, UnstableSimulation
from .model import ValidatedModel, derived_weights
from .numerics import MatrixPath, TimeGrid
from .riccati import RiccatiBundle, solve_structured

log = logging.getLogger(__name__)

STATE_LIMIT = 1e10
NOISE_BATCH_BYTES = 64 * 2**20


def _per_node(X, count: int) -> np.ndarray:
    """Node values of a path, or a constant repeated ``count`` times."""
    if isinstance(X, MatrixPath):
        return X.values
    X = np.asarray(X, dtype=float)
    return np.broadcast_to(X, (count,) + X.shape).copy()


def _interp_nodes(grid: TimeGrid, values: np.ndarray, t: float) -> np.ndarray:
    s = (t - grid.t0) / grid.h
    if s < -1e-9 or s > grid.steps + 1e-9:
        raise ValueError(f"t={t} outside [{grid.t0}, {grid.t1}]")
    k = min(max(int(np.floor(s)), 0), grid.steps - 1)
    u = min(max(s - k, 0.0), 1.0)
    if u == 0.0:
        return values[k]
    if u == 1.0:
        return values[k + 1]
    return (1 - u) * values[k] + u * values[k + 1]


@dataclass(frozen=True, eq=False)
class ControlLaw:
    """``u(t, x) = gain(t) x + offset(t)`` with
    ``gain = -R1^-1 B^T K`` and ``offset = -R1^-1 B^T (phi - P l)``.
    Exact at nodes, linear in between."""

    grid: TimeGrid
    K: np.ndarray  # (nodes, n, n)
    P: np.ndarray
    l: np.ndarray  # (nodes, n)
    phi: np.ndarray
    R1inv: np.ndarray
    B: np.ndarray

    @property
    def gain(self) -> np.ndarray:
        return -(self.R1inv @ self.B.T) @ self.K

    @property
    def offset(self) -> np.ndarray:
        Pl = np.einsum("kij,kj->ki", self.P, self.l)
        return -(self.phi - Pl) @ (self.R1inv @ self.B.T).T

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:
        g = _interp_nodes(self.grid, self.gain, t)
        o = _interp_nodes(self.grid, self.offset, t)
        return x @ g.T + o if np.ndim(x) > 1 else g @ x + o


@dataclass(frozen=True, eq=False)
class DriftLaw:
    """``f(t, x_avg) = -R2^-1 (P x_avg + Ptilde (x_avg - xbar) + sbar)``."""

    grid: TimeGrid
    P: np.ndarray
    Ptilde: np.ndarray
    xbar: np.ndarray
    sbar: np.ndarray
    R2inv: np.ndarray

    @property
    def gain(self) -> np.ndarray:
        return -self.R2inv @ (self.P + self.Ptilde)

    @property
    def offset(self) -> np.ndarray:
        inner = self.sbar - np.einsum("kij,kj->ki", self.Ptilde, self.xbar)
        return -inner @ self.R2inv.T

    def deterministic(self) -> np.ndarray:
        """Node values of the drift when ``x_avg = xbar``."""
        return -(np.einsum("kij,kj->ki", self.P, self.xbar) + self.sbar) @ self.R2inv.T

    def __call__(self, t: float, x_avg: np.ndarray) -> np.ndarray:
        g = _interp_nodes(self.grid, self.gain, t)
        o = _interp_nodes(self.grid, self.offset, t)
        return g @ x_avg + o


def _check_grids(bundle: RiccatiBundle, profile: ConsistencyProfile) -> None:
    if bundle.finite and bundle.grid != profile.grid:
        raise GridMismatch(f"bundle grid {bundle.grid} differs from profile grid {profile.grid}")


def build_decentralized_law(m: ValidatedModel, bundle: RiccatiBundle,
                            profile: ConsistencyProfile) -> ControlLaw:
    _check_grids(bundle, profile)
    cnt = profile.grid.steps + 1
    return ControlLaw(profile.grid, _per_node(bundle.K, cnt), _per_node(bundle.P, cnt),
                      profile.l, profile.phi, m.R1inv, m.B)


def build_worstcase_law(m: ValidatedModel, bundle: RiccatiBundle,
                        profile: ConsistencyProfile) -> DriftLaw:
    """Realized worst-case drift along the synthesized closed loop.

    Raises
    ------
    MissingPtilde
        When the mean-field error Riccati has no solution.
    """
    if bundle.Ptilde is None:
        raise MissingPtilde("Ptilde is required for the realized worst-case drift")
    _check_grids(bundle, profile)
    cnt = profile.grid.steps + 1
    return DriftLaw(profile.grid, _per_node(bundle.P, cnt), _per_node(bundle.Ptilde, cnt),
                    profile.xbar, profile.sbar, m.R2inv)


# -- simulation -----------------------------------------------------------------


@dataclass(frozen=True)
class SimConfig:
    N: int
    replications: int
    dt: float | None = None  # None: the law's grid step
    seed: int = 0
    record_paths: bool = False
    backend: str | None = None  # "numba" | "numpy" | None (default)

    def __post_init__(self):
        if self.N < 1 or self.replications < 1:
            raise ValueError("N and replications must be positive")


@dataclass(eq=False)
class SimResult:
    """Outputs of :func:`simulate`.

    ``costs[r, i]`` is agent ``i``'s cost in replication ``r``;
    ``penalty[r]`` the drift penalty ``-1/2 int |f|^2_R2`` (included in
    every agent's cost); ``mf_error[r, k]`` is
    ``|x_hat - xbar|^2 + |s_hat - sbar|^2`` at node ``k`` and ``mf_state``
    its first term alone.
    """

    N: int
    times: np.ndarray
    costs: np.ndarray
    penalty: np.ndarray
    mf_error: np.ndarray
    mf_state: np.ndarray
    xhat: np.ndarray | None = None
    drift: np.ndarray | None = None
    tail_bound: float | None = None
    config: SimConfig | None = None

    @property
    def replications(self) -> int:
        return self.costs.shape[0]

    def meanfield_sup(self, part: str = "total") -> tuple[float, float]:
        """``sup_t`` of the replication mean of the mean-field error with the
        standard error at the maximizing node. ``part`` is ``"total"``,
        ``"state"`` or ``"adjoint"``."""
        err = {"total": self.mf_error, "state": self.mf_state,
               "adjoint": self.mf_error - self.mf_state}[part]
        mean = err.mean(axis=0)
        k = int(np.argmax(mean))
        R = self.replications
        se = float(err[:, k].std(ddof=1) / np.sqrt(R)) if R > 1 else float("nan")
        return float(mean[k]), se


def _mean_se(x: np.ndarray) -> tuple[float, float]:
    R = len(x)
    return float(np.mean(x)), float(np.std(x, ddof=1) / np.sqrt(R)) if R > 1 else float("nan")


@dataclass
class CostStats:
    per_agent_mean: float
    per_agent_se: float
    penalty_mean: float
    penalty_se: float
    tail_bound: float | None = None

    def to_json(self) -> dict:
        return dict(self.__dict__)


def evaluate_social_cost(result: SimResult) -> CostStats:
    """Mean and standard error (across replications) of ``(1/N) sum_i J_i``
    and of the drift penalty."""
    per_rep = result.costs.mean(axis=1)
    m, s = _mean_se(per_rep)
    pm, ps = _mean_se(result.penalty)
    return CostStats(m, s, pm, ps, result.tail_bound)


def agent_streams(seed: int, rep: int, N: int, n: int, d: int, steps: int):
    """Initial standard normals and Brownian increments (unit variance per
    step) for every agent of one replication; agent ``a`` uses the Philox
    stream keyed by ``(seed, rep, a)`` and draws ``n`` values, then
    ``steps * d``."""
    z0 = np.empty((N, n))
    dW = np.empty((N, steps, d))
    for a in range(N):
        g = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(rep, a))))
        z0[a] = g.standard_normal(n)
        dW[a] = g.standard_normal((steps, d))
    return z0, dW


def simulate(m: ValidatedModel, law: ControlLaw, drift: DriftLaw, cfg: SimConfig,
             agent_order: np.ndarray | None = None) -> SimResult:
    """Euler-Maruyama simulation of the N-agent closed loop.

    States are propagated as deviations from the deterministic mean path
    ``xbar`` (exact when there is no noise and no initial spread). Costs use
    the trapezoid rule on the simulation grid, with the ``exp(-rho t)``
    weight on an infinite horizon and the terminal ``H`` term on a finite
    one. ``agent_order`` permutes the seed streams (used to test
    exchangeability).

    Raises
    ------
    UnstableSimulation
        If any state exceeds 1e10 in absolute value.
    """
    grid = law.grid
    if drift.grid != grid:
        raise GridMismatch("control and drift laws live on different grids")
    n, d, N = m.n, m.d, cfg.N
    stride = 1
    if cfg.dt is not None:
        ratio = cfg.dt / grid.h
        stride = int(round(ratio))
        if stride < 1 or abs(ratio - stride) > 1e-9 * max(1.0, ratio):
            raise ValueError(f"dt={cfg.dt} is not a multiple of the law step {grid.h}")
        if grid.steps % stride:
            raise ValueError(f"dt={cfg.dt} does not divide the horizon")
    idx = np.arange(0, grid.steps + 1, stride)
    steps = len(idx) - 1
    dt = grid.h * stride
    times = grid.nodes[idx]

    K, P, Pt = law.K[idx], law.P[idx], drift.Ptilde[idx]
    Abar = m.A - m.S @ K
    Gbar = m.G - m.R2inv @ P
    L = Gbar - m.R2inv @ Pt
    xbar = drift.xbar[idx]
    w = np.full(steps + 1, dt)
    w[0] = w[-1] = 0.5 * dt
    if m.horizon.finite:
        terminal = True
    else:
        terminal = False
        w = w * np.exp(-m.rho * times)
    coeffs = (Abar, L, m.sigma, xbar, law.gain[idx], law.offset[idx],
              drift.gain[idx], drift.offset[idx], m.Q, m.Gamma, m.eta, m.R1, m.R2, m.H, Pt, w)

    R = cfg.replications
    per_rep_bytes = max(1, N * steps * d * 8)
    batch = int(max(1, min(R, NOISE_BATCH_BYTES // per_rep_bytes)))
    order = np.arange(N) if agent_order is None else np.asarray(agent_order)
    costs = np.empty((R, N))
    penalty = np.empty(R)
    mf = np.empty((R, steps + 1))
    mfx = np.empty((R, steps + 1))
    rec = cfg.record_paths
    xhat = np.empty((R, steps + 1, n)) if rec else None
    fpath = np.empty((R, steps + 1, n)) if rec else None
    sq = np.sqrt(dt)
    spread = float(m.init_spread)
    for r0 in range(0, R, batch):
        r1 = min(R, r0 + batch)
        delta0 = np.empty((r1 - r0, N, n))
        dW = np.empty((r1 - r0, N, steps, d))
        for j, rep in enumerate(range(r0, r1)):
            z0, inc = agent_streams(cfg.seed, rep, N, n, d, steps)
            delta0[j] = spread * z0[order]
            dW[j] = sq * inc[order]
        c, p, e, ex, xh, fp, status = _kernels.em_closed_loop(
            delta0, dW, dt, *coeffs, terminal, STATE_LIMIT, rec, backend=cfg.backend)
        if status != _kernels.OK:
            raise UnstableSimulation(f"state exceeded {STATE_LIMIT:g} in replications {r0}..{r1 - 1}")
        costs[r0:r1], penalty[r0:r1], mf[r0:r1], mfx[r0:r1] = c, p, e, ex
        if rec:
            xhat[r0:r1], fpath[r0:r1] = xh, fp
    tail = None
    if not m.horizon.finite and m.rho > 0:
        tail = discounted_tail_bound(m, law, drift, times[-1])
    return SimResult(N, times, costs, penalty, mf, mfx, xhat, fpath, tail, cfg)


def discounted_tail_bound(m: ValidatedModel, law: ControlLaw, drift: DriftLaw,
                          t_end: float) -> float:
    """``exp(-rho t_end) * c / rho`` where ``c`` is the per-agent running
    cost at the steady state: the deterministic mean part plus the
    stationary covariance of one agent's deviation (the O(1/N) coupling
    through the average is ignored)."""
    k = -1
    xb = drift.xbar[k]
    xh = xb
    e = xb - m.Gamma @ xh - m.eta
    u = law.gain[k] @ xb + law.offset[k]
    f = drift.gain[k] @ xh + drift.offset[k]
    run = e @ m.Q @ e + u @ m.R1 @ u - f @ m.R2 @ f
    Abar = m.A - m.S @ law.K[k]
    if np.max(np.linalg.eigvals(Abar).real) < 0:
        Sigma = solve_continuous_lyapunov(Abar, -m.sigma @ m.sigma.T)
        run += np.trace((m.Q + law.gain[k].T @ m.R1 @ law.gain[k]) @ Sigma)
    else:
        return float("inf")
    return float(np.exp(-m.rho * t_end) * abs(0.5 * run) / m.rho)


# -- sweeps -------------------------------------------------------------------------


@dataclass
class SweepReport:
    Ns: list
    estimates: list
    stderrs: list
    slope: float | None
    intercept: float | None
    degenerate: bool
    replications: int
    seed: int

    def to_json(self) -> dict:
        return {
            "slope": self.slope, "intercept": self.intercept, "degenerate": self.degenerate,
            "replications": self.replications, "seed": self.seed,
            "rows": [{"N": int(N), "estimate": e, "stderr": s}
                     for N, e, s in zip(self.Ns, self.estimates, self.stderrs)],
        }

    def slope_in(self, lo: float = -1.3, hi: float = -0.7) -> bool:
        return self.slope is not None and lo <= self.slope <= hi


def loglog_slope(Ns, values) -> tuple[float, float]:
    """Least-squares fit of ``log(values) = slope * log(N) + intercept``."""
    slope, intercept = np.polyfit(np.log(np.asarray(Ns, float)), np.log(np.asarray(values, float)), 1)
    return float(slope), float(intercept)


def meanfield_error_sweep(m: ValidatedModel, law: ControlLaw, drift: DriftLaw, Ns,
                          replications: int, seed: int = 0, dt: float | None = None,
                          backend: str | None = None) -> SweepReport:
    """Monte Carlo estimate of ``sup_t E(|x_hat - xbar|^2 + |s_hat - sbar|^2)``
    for each ``N`` and the log-log slope against ``N``."""
    Ns = [int(N) for N in Ns]
    if len(Ns) < 3 or min(Ns) < 8:
        raise ValueError("the sweep needs at least 3 agent counts, each >= 8")
    est, ses = [], []
    for N in Ns:
        res = simulate(m, law, drift, SimConfig(N, replications, dt, seed, backend=backend))
        e, s = res.meanfield_sup()
        log.info("N=%d: sup error %.4g +- %.2g", N, e, s)
        est.append(e)
        ses.append(s)
    if min(est) <= 0.0:
        return SweepReport(Ns, est, ses, None, None, True, replications, seed)
    slope, icpt = loglog_slope(Ns, est)
    return SweepReport(Ns, est, ses, slope, icpt, False, replications, seed)


# -- deterministic cost decomposition ------------------------------------------------


def _half_linear(prof: np.ndarray) -> np.ndarray:
    out = np.empty((2 * len(prof) - 1,) + prof.shape[1:])
    out[0::2] = prof
    out[1::2] = 0.5 * (prof[:-1] + prof[1:])
    return out


@dataclass
class P2Trajectory:
    x: np.ndarray  # (nodes, N, n)
    s: np.ndarray  # (nodes, n)
    u: np.ndarray  # (nodes, N, r)


def solve_p2_deterministic(m: ValidatedModel, bundle: RiccatiBundle, u: np.ndarray,
                           x0: np.ndarray, affine: bool = True) -> P2Trajectory:
    """State and adjoint of the control problem left after the worst-case
    drift, without noise, for given node profiles ``u[k, i]`` (linear in
    between):

        x_i' = A x_i + Gbar x_avg + B u_i - R2^-1 s
        s'   = -[(A + Gbar)^T s + P B u_avg + eta_bar],   s(T) = 0

    With ``affine=False`` the ``eta_bar`` forcing is dropped (variations).
    """
    grid = bundle.grid
    n = m.n
    N = u.shape[1]
    Ph = bundle.P.half_nodes()
    Gbar_h = m.G - m.R2inv @ Ph
    AGb = m.A + Gbar_h
    uh = _half_linear(u)
    Bu_avg = uh.mean(axis=1) @ m.B.T
    eb = derived_weights(m).eta_bar if affine else np.zeros(n)
    Cs = -(Ph @ Bu_avg[..., None]) - eb[:, None]
    s = solve_structured(Cs, -np.swapaxes(AGb, 1, 2), np.zeros((1, 1)), np.zeros((1, n)),
                         np.zeros((n, 1)), grid, "backward", quad=False)
    sh = s.half_nodes()[..., 0]
    # stacked agents: X' = (I (x) A + 1/N 11^T (x) Gbar) X + B u - 1 (x) R2^-1 s
    J = np.ones((N, N)) / N
    D = np.kron(np.eye(N), m.A)[None] + np.einsum("ab,kij->kaibj", J, Gbar_h).reshape(-1, N * n, N * n)
    C = (uh @ m.B.T).reshape(len(uh), N * n) - np.tile(sh @ m.R2inv.T, (1, N))
    X = solve_structured(C[..., None], D, np.zeros((1, 1)), np.zeros((1, N * n)),
                         np.asarray(x0, float).reshape(N * n, 1), grid, "forward", quad=False)
    return P2Trajectory(X.values[..., 0].reshape(-1, N, n), s.values[..., 0], u)


def _running_terms(m, P, traj_a, traj_b, eta_a, affine_a):
    """Node integrands of the symmetric bilinear form <a, b> of the cost."""
    xa, xb = traj_a.x, traj_b.x
    ea = xa - np.einsum("ij,kj->ki", m.Gamma, xa.mean(axis=1))[:, None, :] - (m.eta if affine_a else 0.0)
    eb = xb - np.einsum("ij,kj->ki", m.Gamma, xb.mean(axis=1))[:, None, :]
    q = np.einsum("kai,ij,kaj->k", ea, m.Q, eb)
    uu = np.einsum("kai,ij,kaj->k", traj_a.u, m.R1, traj_b.u)
    za = np.einsum("kij,kj->ki", P, xa.mean(axis=1)) + traj_a.s
    zb = np.einsum("kij,kj->ki", P, xb.mean(axis=1)) + traj_b.s
    N = xa.shape[1]
    ff = N * np.einsum("ki,ij,kj->k", za, m.R2inv, zb)
    return q + uu - ff


def p2_social_cost(m: ValidatedModel, bundle: RiccatiBundle, traj: P2Trajectory) -> float:
    """``1/2 sum_i int (|x_i - Gamma x_avg - eta|_Q^2 + |u_i|_R1^2
    - |P x_avg + s|_{R2^-1}^2) dt + 1/2 sum_i |x_i(T)|_H^2`` (trapezoid)."""
    w = trapezoid_weights(bundle.grid)
    x = traj.x
    e = x - np.einsum("ij,kj->ki", m.Gamma, x.mean(axis=1))[:, None, :] - m.eta
    q = np.einsum("kai,ij,kaj->k", e, m.Q, e)
    uu = np.einsum("kai,ij,kaj->k", traj.u, m.R1, traj.u)
    z = np.einsum("kij,kj->ki", bundle.P.values, x.mean(axis=1)) + traj.s
    ff = x.shape[1] * np.einsum("ki,ij,kj->k", z, m.R2inv, z)
    xT = x[-1]
    return float(0.5 * np.sum(w * (q + uu - ff)) + 0.5 * np.einsum("ai,ij,aj->", xT, m.H, xT))


@dataclass
class DecompositionRow:
    J_total: float
    J_hat: float
    J_tilde: float
    I_cross: float
    rel_error: float


@dataclass
class DecompositionReport:
    N: int
    rows: list = field(default_factory=list)
    tol: float = 1e-6

    @property
    def max_rel_error(self) -> float:
        return max(r.rel_error for r in self.rows) if self.rows else 0.0

    @property
    def min_J_tilde(self) -> float:
        return min(r.J_tilde for r in self.rows) if self.rows else 0.0

    @property
    def holds(self) -> bool:
        return self.max_rel_error <= self.tol and self.min_J_tilde >= -1e-10


def synthesized_open_loop(m: ValidatedModel, law: ControlLaw, profile: ConsistencyProfile,
                          N: int) -> np.ndarray:
    """Node profile ``u[k, i]`` of the decentralized law when every agent
    starts at ``xbar0`` without noise (then every state equals ``xbar``)."""
    u = np.einsum("kij,kj->ki", law.gain, profile.xbar) + law.offset
    return np.repeat(u[:, None, :], N, axis=1)


def cost_decomposition_check(m: ValidatedModel, bundle: RiccatiBundle, profile: ConsistencyProfile,
                             seed: int = 0, perturbations: int = 10, N: int = 4,
                             agent: int = 0, scale: float = 1.0) -> DecompositionReport:
    """Verify ``J(u_hat + u_tilde) = J(u_hat) + J_tilde(u_tilde) + I`` for
    seeded perturbations of one agent's control.

    ``J_tilde`` is the quadratic part (summed over agents) and ``I`` the
    cross term; all three are computed by separate integrations and the
    identity is checked to 1e-6 relative. ``J_tilde >= 0`` is the
    convexity statement.
    """
    law = build_decentralized_law(m, bundle, profile)
    uhat = synthesized_open_loop(m, law, profile, N)
    x0 = np.tile(m.xbar0, (N, 1))
    hat = solve_p2_deterministic(m, bundle, uhat, x0)
    J_hat = p2_social_cost(m, bundle, hat)
    w = trapezoid_weights(bundle.grid)
    P = bundle.P.values
    report = DecompositionReport(N)
    for j in range(perturbations):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(j,)))
        ut = np.zeros_like(uhat)
        ut[:, agent, :] = scale * random_direction(rng, bundle.grid, m.r)
        tilde = solve_p2_deterministic(m, bundle, ut, np.zeros_like(x0), affine=False)
        full = solve_p2_deterministic(m, bundle, uhat + ut, x0)
        J_total = p2_social_cost(m, bundle, full)
        xtT = tilde.x[-1]
        J_tilde = 0.5 * float(np.sum(w * _running_terms(m, P, tilde, tilde, None, False))) \
            + 0.5 * float(np.einsum("ai,ij,aj->", xtT, m.H, xtT))
        I_cross = float(np.sum(w * _running_terms(m, P, hat, tilde, None, True))) \
            + float(np.einsum("ai,ij,aj->", hat.x[-1], m.H, xtT))
        rel = abs(J_total - (J_hat + J_tilde + I_cross)) / max(1.0, abs(J_total))
        report.rows.append(DecompositionRow(J_total, J_hat, J_tilde, I_cross, rel))
    return report
