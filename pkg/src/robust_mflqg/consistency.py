"""Consistency (mean-field fixed point) system for (xbar, l, sbar, phi, v).

Writing ``m = (xbar, l)`` and ``z = (sbar, phi, v)`` the system is linear,

    m' = M11 m + M12 z
    z' = M21 m + M22 z + c,        c = (-eta_bar, eta_bar, eta_bar)

with ``xbar(0) = xbar0``, ``l(0) = 0`` and, on a finite horizon,
``sbar(T) = phi(T) = 0``, ``v(T) = H xbar(T)``. On an infinite horizon the
lower-right block carries an extra ``rho I``. The main route decouples it
with ``z = Y m + alpha``; a linear shooting solver gives an independent
answer.

Two variants of the blocks are available. ``"consistent"`` is derived term
by term from the component equations and is used for all solving.
``"printed"`` reproduces a widely circulated block display that differs in
three entries (``PSK`` instead of ``PS`` in ``M22[0,1]``, a zero instead of
``-KSP`` in ``M21[1,1]``, and untransposed diagonal blocks of ``M22``); it is
kept because the classical blow-up time of the Z equation on the reference
example is a property of that variant.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import (
    BadHorizon,
    BlowUp,
    NewtonDivergence,
    NoAdmissibleY,
    NoConvergence,
    Singular,
    SingularBoundaryMap,
    YBlowUp,
)
from .model import ValidatedModel, derived_weights
from .numerics import (
    DEFAULT_BLOWUP_NORM,
    MatrixPath,
    TimeGrid,
    is_hurwitz,
    solve_linear,
    spectral_abscissa,
)
from .riccati import (
    RiccatiBundle,
    newton_nonsymmetric_are,
    solve_K_finite,
    solve_nonsymmetric_are,
    solve_P_finite,
    solve_structured,
)

FORMS = ("consistent", "printed")
T_TRUNC_CAP = 200.0
T_TRUNC_DECAY = 1e-8
INFINITE_MAX_H = 0.002


class Method(str, Enum):
    RICCATI = "riccati_decoupling"
    SHOOTING = "shooting"
    ARE = "are_decoupling"


@dataclass(frozen=True, eq=False)
class BlockMatrices:
    M11: np.ndarray
    M12: np.ndarray
    M21: np.ndarray
    M22: np.ndarray

    def full(self) -> np.ndarray:
        top = np.concatenate([self.M11, self.M12], axis=-1)
        bottom = np.concatenate([self.M21, self.M22], axis=-1)
        return np.concatenate([top, bottom], axis=-2)


def _T(X):
    return np.swapaxes(X, -1, -2)


def assemble_blocks(m: ValidatedModel, P: np.ndarray, K: np.ndarray,
                    form: str = "consistent") -> BlockMatrices:
    """Blocks at one time (``P``, ``K`` of shape ``(n, n)``) or at a stack of
    times (shape ``(k, n, n)``). Infinite-horizon models get ``+rho I`` in
    ``M22``."""
    if form not in FORMS:
        raise ValueError(f"form must be one of {FORMS}, got {form!r}")
    n = m.n
    P = np.asarray(P, dtype=float)
    K = np.asarray(K, dtype=float)
    if P.shape[-2:] != (n, n) or K.shape[-2:] != (n, n) or P.shape != K.shape:
        from .errors import DimensionMismatch
        raise DimensionMismatch(f"P {P.shape} and K {K.shape} must both be (..., {n}, {n})")
    lead = P.shape[:-2]
    A, G, S, R2inv = m.A, m.G, m.S, m.R2inv
    Psi = derived_weights(m).Psi
    I = np.broadcast_to(np.eye(n), lead + (n, n))
    Z = np.zeros(lead + (n, n))
    Gbar = G - R2inv @ P
    Abar = A - S @ K
    AG = A + Gbar
    PRP = P @ R2inv @ P

    def blk(rows):
        return np.concatenate([np.concatenate(r, axis=-1) for r in rows], axis=-2)

    M11 = blk([[Abar + Gbar, S @ P], [R2inv @ P, AG]])
    M12 = blk([[-R2inv + Z, -S + Z, Z], [R2inv + Z, Z, R2inv + Z]])
    if form == "consistent":
        M21 = blk([[P @ S @ K, -(P @ S @ P)],
                   [-(K @ Gbar) + Psi + PRP, -(K @ S @ P)],
                   [Psi - m.Q + PRP, Z]])
        M22 = blk([[-_T(AG), P @ S, Z],
                   [(K + P) @ R2inv, -_T(Abar), -_T(Gbar)],
                   [P @ R2inv, Z, -_T(AG)]])
    else:
        M21 = blk([[P @ S @ K, -(P @ S @ P)],
                   [-(K @ Gbar) + Psi + PRP, Z],
                   [Psi - m.Q + PRP, Z]])
        M22 = blk([[-AG, P @ S @ K, Z],
                   [(K + P) @ R2inv, -Abar, -_T(Gbar)],
                   [P @ R2inv, Z, -AG]])
    if not m.horizon.finite:
        M22 = M22 + m.rho * np.eye(3 * n)
    return BlockMatrices(M11, M12, M21, M22)


def affine_term(m: ValidatedModel) -> np.ndarray:
    """``(0, 0, -eta_bar, eta_bar, eta_bar)`` as a ``5n`` vector."""
    eb = derived_weights(m).eta_bar
    z = np.zeros(m.n)
    return np.concatenate([z, z, -eb, eb, eb])


# -- profile types ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ConsistencyProfile:
    grid: TimeGrid
    xbar: np.ndarray
    l: np.ndarray
    sbar: np.ndarray
    phi: np.ndarray
    v: np.ndarray
    method: Method

    @property
    def state(self) -> np.ndarray:
        """``(nodes, 5n)`` array in the order (xbar, l, sbar, phi, v)."""
        return np.concatenate([self.xbar, self.l, self.sbar, self.phi, self.v], axis=1)

    @property
    def times(self) -> np.ndarray:
        return self.grid.nodes

    @classmethod
    def from_state(cls, grid: TimeGrid, state: np.ndarray, method: Method) -> ConsistencyProfile:
        n = state.shape[1] // 5
        parts = [state[:, i * n:(i + 1) * n].copy() for i in range(5)]
        return cls(grid, *parts, method=method)

    def derivative(self, m: ValidatedModel, bundle: RiccatiBundle, form: str = "consistent") -> np.ndarray:
        """Right-hand side of the system at each node."""
        blocks = _node_blocks(m, bundle, self.grid, form)
        Mfull = blocks.full()
        rhs = np.einsum("...ij,kj->ki", Mfull, self.state) if Mfull.ndim == 2 else \
            np.einsum("kij,kj->ki", Mfull, self.state)
        return rhs + affine_term(m)

    def half_nodes(self, m: ValidatedModel, bundle: RiccatiBundle) -> np.ndarray:
        """State at nodes and midpoints via cubic Hermite."""
        y = self.state
        d = self.derivative(m, bundle)
        out = np.empty((2 * len(y) - 1, y.shape[1]))
        out[0::2] = y
        out[1::2] = 0.5 * (y[:-1] + y[1:]) + (self.grid.h / 8.0) * (d[:-1] - d[1:])
        return out

    def to_csv(self, path: str | Path) -> None:
        n = self.xbar.shape[1]
        names = ["t"] + [f"{c}{i}" for c in ("xbar", "l", "sbar", "phi", "v") for i in range(n)]
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(names)
            for t, row in zip(self.times, self.state):
                wr.writerow([f"{t:.17g}"] + [f"{x:.17g}" for x in row])


@dataclass(frozen=True, eq=False)
class DecouplingSolution:
    Y: MatrixPath | np.ndarray
    alpha: MatrixPath | np.ndarray
    Z: MatrixPath | None = None
    closed_loop_abscissa: float | None = None
    T_trunc: float | None = None
    newton_residual: float | None = None


def _node_blocks(m: ValidatedModel, bundle: RiccatiBundle, grid: TimeGrid, form: str) -> BlockMatrices:
    if bundle.finite:
        if bundle.grid != grid:
            raise ValueError("profile and bundle grids differ")
        return assemble_blocks(m, bundle.P.values, bundle.K.values, form)
    return assemble_blocks(m, bundle.P, bundle.K, form)


def _half_blocks(m: ValidatedModel, P: MatrixPath, K: MatrixPath, form: str) -> BlockMatrices:
    return assemble_blocks(m, P.half_nodes(), K.half_nodes(), form)


def _y_terminal(m: ValidatedModel) -> np.ndarray:
    n = m.n
    Y = np.zeros((3 * n, 2 * n))
    Y[2 * n:, :n] = m.H
    return Y


# -- finite horizon -------------------------------------------------------------


def _require_finite_bundle(m: ValidatedModel, bundle: RiccatiBundle) -> TimeGrid:
    if not m.horizon.finite or not bundle.finite:
        raise BadHorizon("finite-horizon consistency solver needs a finite-horizon bundle")
    return bundle.grid


def solve_consistency_finite(m: ValidatedModel, bundle: RiccatiBundle,
                             form: str = "consistent",
                             blowup_norm: float = DEFAULT_BLOWUP_NORM):
    """Riccati decoupling ``z = Y m + alpha``.

    ``Y`` runs backward from ``Y(T)`` (``v = H xbar`` at ``T``), ``alpha``
    backward from zero, then ``m`` forward from ``(xbar0, 0)``.

    Returns ``(ConsistencyProfile, DecouplingSolution)``.

    Raises
    ------
    YBlowUp
        The decoupling Riccati escapes; the route certifies nothing.
    """
    grid = _require_finite_bundle(m, bundle)
    n = m.n
    hb = _half_blocks(m, bundle.P, bundle.K, form)
    Y = solve_structured(hb.M21, hb.M22, hb.M11, hb.M12, _y_terminal(m), grid, "backward", blowup_norm)
    if not Y.complete:
        raise YBlowUp("Y", Y.blowup_time, Y)
    Yh = Y.half_nodes()
    c = affine_term(m)[2 * n:, None]
    alpha = solve_structured(c, hb.M22 - Yh @ hb.M12, np.zeros((1, 1)), np.zeros((1, 3 * n)),
                             np.zeros((3 * n, 1)), grid, "backward", blowup_norm, quad=False)
    ah = alpha.half_nodes()
    m0 = np.concatenate([m.xbar0, np.zeros(n)])[:, None]
    mp = solve_structured(hb.M12 @ ah, hb.M11 + hb.M12 @ Yh, np.zeros((1, 1)), np.zeros((1, 2 * n)),
                          m0, grid, "forward", blowup_norm, quad=False)
    if not (alpha.complete and mp.complete):
        raise BlowUp("consistency state", (alpha.blowup_time or mp.blowup_time), None)
    mv = mp.values[..., 0]
    zv = np.einsum("kij,kj->ki", Y.values, mv) + alpha.values[..., 0]
    state = np.concatenate([mv, zv], axis=1)
    return (ConsistencyProfile.from_state(grid, state, Method.RICCATI),
            DecouplingSolution(Y=Y, alpha=alpha))


def solve_consistency_finite_shooting(m: ValidatedModel, bundle: RiccatiBundle,
                                      form: str = "consistent") -> ConsistencyProfile:
    """Linear shooting on the unknown ``z(0)``.

    One forward pass integrates ``3n`` homogeneous basis solutions and one
    particular solution side by side; the terminal conditions then give a
    ``3n x 3n`` linear system.

    Raises
    ------
    SingularBoundaryMap
    """
    grid = _require_finite_bundle(m, bundle)
    n = m.n
    hb = _half_blocks(m, bundle.P, bundle.K, form)
    Mfull = hb.full()
    c = affine_term(m)
    ncol = 3 * n + 1
    X0 = np.zeros((5 * n, ncol))
    X0[2 * n:, :3 * n] = np.eye(3 * n)
    X0[:n, -1] = m.xbar0
    Cc = np.zeros((5 * n, ncol))
    Cc[:, -1] = c
    path = solve_structured(Cc, Mfull, np.zeros((ncol, ncol)), np.zeros((ncol, 5 * n)),
                            X0, grid, "forward", blowup_norm=1e12, quad=False)
    if not path.complete:
        raise SingularBoundaryMap("shooting basis overflowed")
    XT = path.values[-1]
    # terminal operator: (sbar, phi, v - H xbar)
    Bop = np.zeros((3 * n, 5 * n))
    Bop[:, 2 * n:] = np.eye(3 * n)
    Bop[2 * n:, :n] = -m.H
    try:
        w = solve_linear(Bop @ XT[:, :3 * n], -(Bop @ XT[:, -1]))
    except Singular as exc:
        raise SingularBoundaryMap(str(exc)) from None
    coef = np.concatenate([w, [1.0]])
    state = path.values @ coef
    return ConsistencyProfile.from_state(grid, state, Method.SHOOTING)


@dataclass(frozen=True)
class ZBlowup:
    time: float | None
    bracket: tuple[float, float] | None
    steps: int
    form: str
    t_end: float
    history: tuple = ()

    def to_json(self) -> dict:
        return {"blowup": self.time is not None, "time": self.time,
                "bracket": list(self.bracket) if self.bracket else None,
                "steps": self.steps, "form": self.form, "t_end": self.t_end,
                "history": [list(h) for h in self.history]}


def _z_path(m: ValidatedModel, P: MatrixPath, K: MatrixPath, grid: TimeGrid, t_end: float,
            form: str, blowup_norm: float) -> MatrixPath:
    n = m.n
    kend = grid.index_of(t_end)
    sub = TimeGrid(0.0, grid.node(kend), kend)
    hb = assemble_blocks(m, P.half_nodes()[:2 * kend + 1], K.half_nodes()[:2 * kend + 1], form)
    return solve_structured(hb.M12, hb.M11, hb.M22, hb.M21, np.zeros((2 * n, 3 * n)),
                            sub, "forward", blowup_norm)


def detect_Z_blowup(m: ValidatedModel, bundle: RiccatiBundle, t_end: float | None = None,
                    form: str = "printed", refine_tol: float = 1e-3, max_refinements: int = 4,
                    blowup_norm: float = DEFAULT_BLOWUP_NORM) -> ZBlowup:
    """Integrate the forward decoupling Riccati ``Z`` from ``Z(0) = 0``.

    The equation only certifies the consistency system when
    ``eta_bar = 0``. On escape the reported time is the last kept node; the
    step is then halved (with ``P`` and ``K`` recomputed on the finer grid)
    until two successive estimates agree within ``refine_tol``.
    Returns a :class:`ZBlowup` whose ``time`` is ``None`` when ``Z``
    exists on ``[0, t_end]``.
    """
    grid = _require_finite_bundle(m, bundle)
    if np.any(derived_weights(m).eta_bar != 0.0):
        raise ValueError("the Z route is only defined for eta_bar = 0")
    t_end = m.T if t_end is None else float(t_end)
    Zp = _z_path(m, bundle.P, bundle.K, grid, t_end, form, blowup_norm)
    if Zp.complete:
        return ZBlowup(None, None, grid.steps, form, t_end)
    est = Zp.blowup_time
    history = [(grid.steps, est)]
    g = grid
    for _ in range(max_refinements):
        g = g.refine(2)
        P = solve_P_finite(m, g, blowup_norm)
        K = solve_K_finite(m, g, blowup_norm)
        Zp = _z_path(m, P, K, g, t_end, form, blowup_norm)
        new = Zp.blowup_time if not Zp.complete else t_end
        history.append((g.steps, new))
        done = abs(new - est) <= refine_tol
        est = new
        if done:
            break
    return ZBlowup(est, (est, est + g.h), g.steps, form, t_end, tuple(history))


def consistency_residual(profile: ConsistencyProfile, m: ValidatedModel, bundle: RiccatiBundle,
                         form: str = "consistent") -> float:
    """Max-norm mismatch between central differences and the right-hand
    side over interior nodes."""
    y = profile.state
    if len(y) < 3:
        raise ValueError("need at least 3 nodes")
    rhs = profile.derivative(m, bundle, form)
    cd = (y[2:] - y[:-2]) / (2.0 * profile.grid.h)
    return float(np.max(np.abs(cd - rhs[1:-1])))


def boundary_errors(profile: ConsistencyProfile, m: ValidatedModel) -> dict:
    out = {
        "xbar0": float(np.max(np.abs(profile.xbar[0] - m.xbar0))),
        "l0": float(np.max(np.abs(profile.l[0]))),
    }
    if m.horizon.finite:
        out["sbarT"] = float(np.max(np.abs(profile.sbar[-1])))
        out["phiT"] = float(np.max(np.abs(profile.phi[-1])))
        out["vT"] = float(np.max(np.abs(profile.v[-1] - m.H @ profile.xbar[-1])))
    return out


def v_identity_error(profile: ConsistencyProfile, bundle: RiccatiBundle) -> float:
    """``max_t |v - K xbar - phi|``."""
    K = bundle.K.values if bundle.finite else bundle.K
    Kx = np.einsum("...ij,kj->ki", K, profile.xbar) if np.ndim(K) == 2 else \
        np.einsum("kij,kj->ki", K, profile.xbar)
    return float(np.max(np.abs(profile.v - Kx - profile.phi)))


# -- infinite horizon ---------------------------------------------------------------


def truncation_horizon(abscissa: float, rho: float) -> float:
    """Time after which the slowest closed-loop mode has decayed by 1e-8.

    Uses the undiscounted rate when the closed loop is stable and the
    discounted rate ``abscissa - rho/2`` otherwise; capped at 200.
    """
    rate = abscissa if abscissa < 0 else abscissa - 0.5 * rho
    if rate >= 0:
        return T_TRUNC_CAP
    return float(min(T_TRUNC_CAP, np.log(1.0 / T_TRUNC_DECAY) / (-rate)))


def solve_consistency_infinite(m: ValidatedModel, bundle: RiccatiBundle, steps: int = 2000,
                               form: str = "consistent"):
    """ARE decoupling of the discounted consistency system.

    ``Y`` solves ``M21 + (M22 + rho I) Y - Y M11 - Y M12 Y = 0`` (Schur
    start, Newton polish to 1e-12); both ``M11 + M12 Y - rho/2 I`` and
    ``-(M22 + rho I) + Y M12 + rho/2 I`` must be Hurwitz. ``alpha`` is the
    constant solution ``-(M22 + rho I - Y M12)^-1 c`` and ``m`` is
    integrated forward on ``[0, T_trunc]``.

    Returns ``(ConsistencyProfile, DecouplingSolution)``.

    Raises
    ------
    NoAdmissibleY, NewtonDivergence
    """
    if m.horizon.finite or bundle.finite:
        raise BadHorizon("infinite-horizon consistency solver needs constant Riccati solutions")
    n = m.n
    rho = m.rho
    blocks = assemble_blocks(m, bundle.P, bundle.K, form)  # M22 already has +rho I
    M11, M12, M21, M22 = blocks.M11, blocks.M12, blocks.M21, blocks.M22
    try:
        Y0 = solve_nonsymmetric_are(M21, M22, M11, M12, shift=0.5 * rho)
    except NoConvergence as exc:
        raise NoAdmissibleY(f"no clean invariant subspace: {exc}") from None
    Y, res, _ = newton_nonsymmetric_are(M21, M22, M11, M12, Y0, tol=1e-12, maxiter=50)
    if not np.isfinite(res) or res > 1e-10 * (1.0 + np.linalg.norm(Y) ** 2):
        raise NewtonDivergence(f"Y residual {res:.3e} after Newton")
    Acl = M11 + M12 @ Y
    if not is_hurwitz(Acl - 0.5 * rho * np.eye(2 * n)):
        raise NoAdmissibleY("M11 + M12 Y - rho/2 I is not Hurwitz")
    if not is_hurwitz(-M22 + Y @ M12 + 0.5 * rho * np.eye(3 * n)):
        raise NoAdmissibleY("-(M22 + rho I) + Y M12 + rho/2 I is not Hurwitz")
    c = affine_term(m)[2 * n:]
    alpha = -solve_linear(M22 - Y @ M12, c)
    mu = spectral_abscissa(Acl)
    T = truncation_horizon(mu, rho)
    grid = TimeGrid(0.0, T, max(int(steps), int(np.ceil(T / INFINITE_MAX_H))))
    m0 = np.concatenate([m.xbar0, np.zeros(n)])[:, None]
    mp = solve_structured((M12 @ alpha)[:, None], Acl, np.zeros((1, 1)), np.zeros((1, 2 * n)),
                          m0, grid, "forward", quad=False)
    if not mp.complete:
        raise BlowUp("consistency state", mp.blowup_time, mp)
    mv = mp.values[..., 0]
    zv = mv @ Y.T + alpha
    state = np.concatenate([mv, zv], axis=1)
    prof = ConsistencyProfile.from_state(grid, state, Method.ARE)
    return prof, DecouplingSolution(Y=Y, alpha=alpha, closed_loop_abscissa=mu, T_trunc=T,
                                    newton_residual=float(res))


def steady_state(decoupling: DecouplingSolution, m: ValidatedModel, bundle: RiccatiBundle,
                 form: str = "consistent") -> np.ndarray | None:
    """Equilibrium of ``m`` (``None`` when the closed loop is not stable)."""
    blocks = assemble_blocks(m, bundle.P, bundle.K, form)
    Acl = blocks.M11 + blocks.M12 @ decoupling.Y
    if spectral_abscissa(Acl) >= 0:
        return None
    return -solve_linear(Acl, blocks.M12 @ decoupling.alpha)


def solve_consistency(m: ValidatedModel, bundle: RiccatiBundle, form: str = "consistent"):
    """Dispatch on the horizon."""
    if m.horizon.finite:
        return solve_consistency_finite(m, bundle, form)
    return solve_consistency_infinite(m, bundle, form=form)
