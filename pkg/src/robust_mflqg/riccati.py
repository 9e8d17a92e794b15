"""Riccati equations of the synthesis, finite and infinite horizon.

Three equations appear:

* ``P`` (worst-case drift):
  ``P' + (A+G)^T P + P (A+G) - P R2^-1 P - (I-Gamma)^T Q (I-Gamma) = 0``, ``P(T) = -H``.
* ``K`` (auxiliary control): ``K' + A^T K + K A - K S K + Q = 0``, ``K(T) = H``,
  with ``S = B R1^-1 B^T``.
* ``Ptilde`` (mean-field error):
  ``Pt' + Pt (Abar+Gbar) + (A+Gbar)^T Pt - Pt R2^-1 Pt + P S K = 0``, ``Pt(T) = 0``,
  with ``Gbar = G - R2^-1 P`` and ``Abar = A - S K``.

All of them, and the linear ODEs of the consistency module, have the form
``X' = C + D X - X E - X F X``; :func:`solve_structured` integrates that
form with RK4 on a grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from . import _kernels
from .errors import (
    BadHorizon,
    BlowUp,
    NoAdmissibleSolution,
    NoConvergence,
    NoStabilizingSolution,
    NonFiniteField,
)
from .model import ValidatedModel, derived_weights
from .numerics import (
    DEFAULT_BLOWUP_NORM,
    MatrixPath,
    TimeGrid,
    is_hurwitz,
    spectral_abscissa,
    stable_subspace,
    symmetrize,
)

ARE_RESIDUAL_TOL = 1e-10
HURWITZ_TOL = 1e-9


def _coef(X: np.ndarray, ndim: int = 3) -> np.ndarray:
    """Constant coefficient -> leading axis of length 1."""
    X = np.asarray(X, dtype=float)
    return X[None] if X.ndim == ndim - 1 else X


def solve_structured(C, D, E, F, boundary, grid: TimeGrid, direction: str,
                     blowup_norm: float = DEFAULT_BLOWUP_NORM, quad: bool = True,
                     backend: str | None = None) -> MatrixPath:
    """RK4 for ``X' = C + D X - X E - X F X`` on ``grid``.

    Each coefficient is either one matrix (constant) or an array of
    ``2 * steps + 1`` samples at nodes and midpoints in increasing time.
    The returned path may be partial, with ``blowup`` set; it never raises
    for escape, only :class:`NonFiniteField`.
    """
    C, D, E, F = (_coef(c) for c in (C, D, E, F))
    for c in (C, D, E, F):
        if c.shape[0] not in (1, 2 * grid.steps + 1):
            raise ValueError(f"coefficient length {c.shape[0]} does not match the grid")
    back = direction == "backward"
    if back:
        C, D, E, F = (c[::-1] for c in (C, D, E, F))
    h = -grid.h if back else grid.h
    X0 = np.asarray(boundary, dtype=float)
    vals, ders, kept, status = _kernels.riccati_rk4(
        C, D, E, F, X0, h, grid.steps, blowup_norm, quad, backend=backend)
    if status == _kernels.NONFINITE_FIELD:
        k = kept - 1
        raise NonFiniteField(grid.t1 - k * grid.h if back else grid.t0 + k * grid.h)
    vals, ders = vals[:kept], ders[:kept]
    escaped = status == _kernels.ESCAPED
    if back:
        start = grid.steps - kept + 1
        return MatrixPath(grid, vals[::-1].copy(), ders[::-1].copy(), start=start,
                          blowup=start if escaped else None)
    return MatrixPath(grid, vals.copy(), ders.copy(), start=0,
                      blowup=kept - 1 if escaped else None)


def _check_grid(m: ValidatedModel, grid: TimeGrid) -> None:
    if not m.horizon.finite:
        raise BadHorizon("finite-horizon solver called on an infinite-horizon model")
    if abs(grid.t0) > 1e-12 or abs(grid.t1 - m.T) > 1e-12 * max(1.0, m.T):
        raise ValueError(f"grid must span [0, {m.T}], got [{grid.t0}, {grid.t1}]")


def default_grid(m: ValidatedModel, steps: int = 2000) -> TimeGrid:
    return TimeGrid(0.0, m.T, steps)


# -- finite horizon ------------------------------------------------------------


def solve_P_finite(m: ValidatedModel, grid: TimeGrid,
                   blowup_norm: float = DEFAULT_BLOWUP_NORM) -> MatrixPath:
    """Backward RK4 for the worst-case drift Riccati, ``P(T) = -H``.

    Raises
    ------
    BlowUp
        ``what="P"``; ``time`` is the last node reached. Uniform concavity
        in the drift fails on ``[time, T]``.
    """
    _check_grid(m, grid)
    w = derived_weights(m)
    AG = m.A + m.G
    path = solve_structured(w.QIG, -AG.T, AG, -m.R2inv, -m.H, grid, "backward", blowup_norm)
    if not path.complete:
        raise BlowUp("P", path.blowup_time, path)
    return path


def solve_K_finite(m: ValidatedModel, grid: TimeGrid,
                   blowup_norm: float = DEFAULT_BLOWUP_NORM) -> MatrixPath:
    """Backward RK4 for the control Riccati, ``K(T) = H``."""
    _check_grid(m, grid)
    path = solve_structured(-m.Q, -m.A.T, m.A, -m.S, m.H, grid, "backward", blowup_norm)
    if not path.complete:  # impossible for validated data short of overflow
        raise BlowUp("K", path.blowup_time, path)
    return path


def _ptilde_coefficients(m: ValidatedModel, P: np.ndarray, K: np.ndarray):
    """Coefficients (C, D, E, F) of the Ptilde equation at stacked samples."""
    R2inv, S = m.R2inv, m.S
    Gbar = m.G - R2inv @ P
    Abar = m.A - S @ K
    C = -(P @ S @ K)
    D = -np.swapaxes(m.A + Gbar, -1, -2)
    E = Abar + Gbar
    return C, D, E, -R2inv


def solve_Ptilde_finite(m: ValidatedModel, P: MatrixPath, K: MatrixPath, grid: TimeGrid,
                        blowup_norm: float = DEFAULT_BLOWUP_NORM) -> MatrixPath:
    """Backward RK4 for the mean-field error Riccati, ``Ptilde(T) = 0``.

    Raises
    ------
    BlowUp
        ``what="Ptilde"``.
    """
    _check_grid(m, grid)
    if not (P.complete and K.complete) or P.grid != grid or K.grid != grid:
        raise ValueError("P and K must be complete paths on the same grid")
    C, D, E, F = _ptilde_coefficients(m, P.half_nodes(), K.half_nodes())
    path = solve_structured(C, D, E, F, np.zeros((m.n, m.n)), grid, "backward", blowup_norm)
    if not path.complete:
        raise BlowUp("Ptilde", path.blowup_time, path)
    return path


def riccati_residual_P(m: ValidatedModel, P: MatrixPath) -> np.ndarray:
    """Per-node residual of the P equation using the stored derivatives."""
    w = derived_weights(m)
    AG = m.A + m.G
    X = P.values
    res = P.derivs + np.swapaxes(AG, 0, 1) @ X + X @ AG - X @ m.R2inv @ X - w.QIG
    return np.linalg.norm(res, axis=(1, 2))


# -- infinite horizon ------------------------------------------------------------


def _care_residual(a, S, W, X):
    return a.T @ X + X @ a - X @ S @ X + W


def solve_care_stabilizing(a: np.ndarray, S: np.ndarray, W: np.ndarray, what: str) -> np.ndarray:
    """Stabilizing solution of ``a^T X + X a - X S X + W = 0``.

    ``S`` and ``W`` are symmetric but may be indefinite. The solution comes
    from the stable invariant subspace of ``[[a, -S], [-W, -a^T]]`` and is
    polished by Newton (Kleinman) steps. ``a - S X`` is Hurwitz on return.
    """
    n = a.shape[0]
    Ham = np.block([[a, -S], [-W, -a.T]])
    try:
        U, _ = stable_subspace(Ham, n)
    except NoConvergence as exc:
        raise NoStabilizingSolution(f"{what}: Hamiltonian has no clean stable subspace ({exc})") from None
    U1, U2 = U[:n], U[n:]
    if np.linalg.cond(U1) > 1e12:
        raise NoStabilizingSolution(f"{what}: stable subspace is not a graph")
    X = symmetrize(np.linalg.solve(U1.T, U2.T).T)
    scale = 1.0 + np.linalg.norm(a) * np.linalg.norm(X) + np.linalg.norm(S) * np.linalg.norm(X) ** 2 + np.linalg.norm(W)
    for _ in range(8):
        res = _care_residual(a, S, W, X)
        if np.linalg.norm(res) <= 1e-15 * scale:
            break
        ac = a - S @ X
        try:
            dX = sla.solve_continuous_lyapunov(ac.T, -res)
        except (np.linalg.LinAlgError, ValueError):
            break
        Xn = symmetrize(X + dX)
        if np.linalg.norm(_care_residual(a, S, W, Xn)) >= np.linalg.norm(res):
            break
        X = Xn
    if np.linalg.norm(_care_residual(a, S, W, X)) > ARE_RESIDUAL_TOL * max(1.0, scale):
        raise NoStabilizingSolution(f"{what}: residual too large")
    if not is_hurwitz(a - S @ X, 0.0):
        raise NoStabilizingSolution(f"{what}: closed loop is not Hurwitz")
    return X


def _require_infinite(m: ValidatedModel) -> None:
    if m.horizon.finite:
        raise BadHorizon("infinite-horizon solver called on a finite-horizon model")


def solve_P_infinite(m: ValidatedModel) -> np.ndarray:
    """Stabilizing solution of the discounted worst-case drift ARE.

    ``abar^T P + P abar - P R2^-1 P - (I-Gamma)^T Q (I-Gamma) = 0`` with
    ``abar = A + G - rho/2 I``; ``abar - R2^-1 P`` is Hurwitz.
    """
    _require_infinite(m)
    abar = m.A + m.G - 0.5 * m.rho * np.eye(m.n)
    return solve_care_stabilizing(abar, m.R2inv, -derived_weights(m).QIG, "P")


def solve_K_infinite(m: ValidatedModel) -> np.ndarray:
    """Stabilizing solution of ``rho K = A^T K + K A - K S K + Q``."""
    _require_infinite(m)
    a = m.A - 0.5 * m.rho * np.eye(m.n)
    return solve_care_stabilizing(a, m.S, m.Q, "K")


def solve_nonsymmetric_are(C, D, E, F, shift: float = 0.0):
    """Solve ``C + D X - X E - X F X = 0`` with ``E + F X`` having all
    eigenvalues left of ``shift``.

    ``X`` is ``m x p`` and spans the invariant subspace of
    ``[[E, F], [C, D]]`` selected by ordered Schur. Returns ``X``; raises
    :class:`NoConvergence` when the selection is not clean or not a graph.
    """
    p = E.shape[0]
    Ham = np.block([[E, F], [C, D]])
    U, _ = stable_subspace(Ham, p, shift=shift)
    U1, U2 = U[:p], U[p:]
    if np.linalg.cond(U1) > 1e12:
        raise NoConvergence("selected subspace is not a graph")
    return np.linalg.solve(U1.T, U2.T).T


def newton_nonsymmetric_are(C, D, E, F, X, tol: float = 1e-12, maxiter: int = 50):
    """Newton refinement of ``C + D X - X E - X F X = 0``.

    Each step solves the Sylvester equation
    ``(D - X F) dX - dX (E + F X) = -res``. Returns ``(X, residual, iterations)``.
    """
    res = C + D @ X - X @ E - X @ F @ X
    r = np.linalg.norm(res)
    it = 0
    while r > tol and it < maxiter:
        it += 1
        dX = sla.solve_sylvester(D - X @ F, -(E + F @ X), -res)
        X = X + dX
        res = C + D @ X - X @ E - X @ F @ X
        r_new = np.linalg.norm(res)
        if not np.isfinite(r_new):
            return X, r_new, it
        r = r_new
    return X, r, it


def ptilde_are_residual(m: ValidatedModel, P, K, Pt) -> float:
    C, D, E, F = _ptilde_coefficients(m, P, K)
    # stationary form: 0 = -C - D X + X E + X F X, up to sign the same
    return float(np.linalg.norm(C + D @ Pt - Pt @ E - Pt @ F @ Pt))


def solve_Ptilde_infinite(m: ValidatedModel, P: np.ndarray, K: np.ndarray) -> np.ndarray:
    """Admissible solution of the stationary mean-field error equation.

    ``Pt (Abar+Gbar) + (A+Gbar)^T Pt - Pt R2^-1 Pt + P S K = 0`` with both
    ``Abar + Gbar - rho/2 I - R2^-1 Pt`` and ``A + Gbar - rho/2 I - R2^-1 Pt``
    Hurwitz. ``Pt`` is a general square matrix.

    Raises
    ------
    NoAdmissibleSolution
    """
    _require_infinite(m)
    n = m.n
    half = 0.5 * m.rho * np.eye(n)
    C, D, E, F = _ptilde_coefficients(m, P, K)
    # C + D X - X E - X F X = 0 with E + F X = Abar + Gbar - R2^-1 X
    try:
        X = solve_nonsymmetric_are(C, D, E, F, shift=0.5 * m.rho)
    except NoConvergence as exc:
        raise NoAdmissibleSolution(f"Ptilde: {exc}") from None
    X, r, _ = newton_nonsymmetric_are(C, D, E, F, X, tol=1e-14, maxiter=20)
    scale = 1.0 + np.linalg.norm(X) ** 2
    if not np.isfinite(r) or r > ARE_RESIDUAL_TOL * scale:
        raise NoAdmissibleSolution(f"Ptilde: residual {r:.3e}")
    Gbar = m.G - m.R2inv @ P
    Abar = m.A - m.S @ K
    for name, M in (("Abar+Gbar", Abar + Gbar), ("A+Gbar", m.A + Gbar)):
        if not is_hurwitz(M - half - m.R2inv @ X, 0.0):
            raise NoAdmissibleSolution(f"Ptilde: {name} - rho/2 - R2^-1 Ptilde is not Hurwitz")
    return X


# -- bundle ------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RiccatiBundle:
    """P, K and Ptilde for one model.

    On a finite horizon the entries are :class:`MatrixPath` objects on
    ``grid``; on an infinite horizon they are constant matrices and ``grid``
    is ``None``. ``Ptilde`` may be ``None`` when it does not exist.
    """

    P: MatrixPath | np.ndarray
    K: MatrixPath | np.ndarray
    Ptilde: MatrixPath | np.ndarray | None
    grid: TimeGrid | None
    R2inv: np.ndarray
    S: np.ndarray
    G: np.ndarray
    A: np.ndarray

    @property
    def finite(self) -> bool:
        return self.grid is not None

    def _values(self, X):
        return X.values if isinstance(X, MatrixPath) else X

    @property
    def Gbar(self):
        """``G - R2^-1 P`` (per node on a finite horizon)."""
        return self.G - self.R2inv @ self._values(self.P)

    @property
    def Abar(self):
        """``A - B R1^-1 B^T K`` (per node on a finite horizon)."""
        return self.A - self.S @ self._values(self.K)


def solve_bundle(m: ValidatedModel, grid: TimeGrid | None = None, require_ptilde: bool = True,
                 blowup_norm: float = DEFAULT_BLOWUP_NORM) -> RiccatiBundle:
    """All three Riccati solutions. With ``require_ptilde=False`` a missing
    Ptilde is stored as ``None`` instead of raising."""
    if m.horizon.finite:
        grid = grid or default_grid(m)
        P = solve_P_finite(m, grid, blowup_norm)
        K = solve_K_finite(m, grid, blowup_norm)
        try:
            Pt = solve_Ptilde_finite(m, P, K, grid, blowup_norm)
        except BlowUp:
            if require_ptilde:
                raise
            Pt = None
    else:
        grid = None
        P = solve_P_infinite(m)
        K = solve_K_infinite(m)
        try:
            Pt = solve_Ptilde_infinite(m, P, K)
        except NoAdmissibleSolution:
            if require_ptilde:
                raise
            Pt = None
    return RiccatiBundle(P=P, K=K, Ptilde=Pt, grid=grid, R2inv=m.R2inv, S=m.S, G=m.G, A=m.A)


def closed_loop_abscissa(m: ValidatedModel, P: np.ndarray) -> float:
    """Spectral abscissa of ``A + G - rho/2 I - R2^-1 P``."""
    return spectral_abscissa(m.A + m.G - 0.5 * m.rho * np.eye(m.n) - m.R2inv @ P)
