"""Dense linear algebra and fixed-step ODE integration.

Everything downstream works on uniform grids. A :class:`MatrixPath` stores
node values and, when known, node derivatives; with derivatives it
interpolates by cubic Hermite, which keeps RK4 fourth order when one path
feeds the coefficients of another ODE.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg as sla

from .errors import NoConvergence, NonFiniteField, Overflow, Singular

DEFAULT_STEPS = 2000
DEFAULT_BLOWUP_NORM = 1e8
# ||M||_1 beyond which e^M is refused; e^700 is near the float64 ceiling.
EXPM_NORM_LIMIT = 700.0
SINGULAR_PIVOT_RTOL = 1e-14


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    t1: float
    steps: int

    def __post_init__(self):
        if not (self.t1 > self.t0):
            raise ValueError(f"grid needs t1 > t0, got [{self.t0}, {self.t1}]")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError(f"steps must be a positive integer, got {self.steps}")

    @property
    def h(self) -> float:
        return (self.t1 - self.t0) / self.steps

    @property
    def nodes(self) -> np.ndarray:
        return self.t0 + self.h * np.arange(self.steps + 1)

    def node(self, k: int) -> float:
        return self.t0 + k * self.h

    def refine(self, factor: int = 2) -> TimeGrid:
        return TimeGrid(self.t0, self.t1, self.steps * factor)

    def index_of(self, t: float, tol: float = 1e-9) -> int:
        """Index of the node at time ``t`` (must sit on the grid)."""
        k = int(round((t - self.t0) / self.h))
        if k < 0 or k > self.steps or abs(self.node(k) - t) > tol * max(1.0, abs(t)):
            raise ValueError(f"t={t} is not a node of {self}")
        return k


@dataclass(frozen=True, eq=False)
class MatrixPath:
    """Matrix-valued samples on (a contiguous run of) a grid's nodes.

    ``values[j]`` sits at node ``start + j``. A full path has ``start == 0``
    and ``steps + 1`` values. When integration escaped, ``blowup`` is the
    node index of the last value kept, which is the end of the run farthest
    from the boundary.
    """

    grid: TimeGrid
    values: np.ndarray
    derivs: np.ndarray | None = None
    start: int = 0
    blowup: int | None = None

    @property
    def complete(self) -> bool:
        return self.blowup is None

    @property
    def times(self) -> np.ndarray:
        return self.grid.nodes[self.start:self.start + len(self.values)]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[1:]

    def __len__(self) -> int:
        return len(self.values)

    @property
    def blowup_time(self) -> float | None:
        return None if self.blowup is None else self.grid.node(self.blowup)

    def node(self, k: int) -> np.ndarray:
        return self.values[k - self.start]

    def midpoints(self) -> np.ndarray:
        """Values halfway between consecutive stored nodes."""
        y0, y1 = self.values[:-1], self.values[1:]
        if self.derivs is None:
            return 0.5 * (y0 + y1)
        d0, d1 = self.derivs[:-1], self.derivs[1:]
        return 0.5 * (y0 + y1) + (self.grid.h / 8.0) * (d0 - d1)

    def half_nodes(self) -> np.ndarray:
        """Nodes and midpoints interleaved: ``2 * len - 1`` samples."""
        out = np.empty((2 * len(self.values) - 1,) + self.values.shape[1:])
        out[0::2] = self.values
        out[1::2] = self.midpoints()
        return out

    def at(self, t: float) -> np.ndarray:
        """Interpolate at ``t`` (Hermite with derivatives, else linear)."""
        h = self.grid.h
        s = (t - self.grid.t0) / h - self.start
        last = len(self.values) - 1
        if s < -1e-9 or s > last + 1e-9:
            raise ValueError(f"t={t} outside the stored range of the path")
        j = min(max(int(np.floor(s)), 0), max(last - 1, 0))
        if last == 0:
            return self.values[0].copy()
        u = min(max(s - j, 0.0), 1.0)
        y0, y1 = self.values[j], self.values[j + 1]
        if self.derivs is None:
            return (1 - u) * y0 + u * y1
        d0, d1 = self.derivs[j], self.derivs[j + 1]
        h00 = 2 * u**3 - 3 * u**2 + 1
        h10 = u**3 - 2 * u**2 + u
        h01 = -2 * u**3 + 3 * u**2
        h11 = u**3 - u**2
        return h00 * y0 + h10 * h * d0 + h01 * y1 + h11 * h * d1

    def max_asymmetry(self) -> float:
        v = self.values
        return float(np.max(np.abs(v - np.swapaxes(v, 1, 2)))) if v.size else 0.0


def integrate_matrix_ode(
    field: Callable[[float, np.ndarray], np.ndarray],
    boundary: np.ndarray,
    grid: TimeGrid,
    direction: str = "forward",
    blowup_norm: float = DEFAULT_BLOWUP_NORM,
) -> MatrixPath:
    """Classical RK4 for ``dM/dt = field(t, M)`` on ``grid``.

    ``direction="backward"`` places ``boundary`` at ``grid.t1`` and steps
    toward ``grid.t0``. Integration stops at the first node whose Frobenius
    norm exceeds ``blowup_norm`` (or is non-finite); the returned path then
    holds only the nodes kept and has ``blowup`` set.

    Raises
    ------
    NonFiniteField
        If ``field`` is non-finite at a kept node.
    """
    if direction not in ("forward", "backward"):
        raise ValueError(f"direction must be forward or backward, got {direction!r}")
    X = np.array(boundary, dtype=float)
    if X.ndim == 0:
        X = X.reshape(1, 1)
    steps = grid.steps
    back = direction == "backward"
    h = -grid.h if back else grid.h

    vals = np.empty((steps + 1,) + X.shape)
    ders = np.empty_like(vals)
    t = grid.t1 if back else grid.t0
    vals[0] = X
    kept = 1
    escaped = False
    for k in range(steps):
        k1 = np.asarray(field(t, X), dtype=float)
        if not np.all(np.isfinite(k1)):
            raise NonFiniteField(t)
        ders[k] = k1
        k2 = field(t + 0.5 * h, X + 0.5 * h * k1)
        k3 = field(t + 0.5 * h, X + 0.5 * h * k2)
        k4 = field(t + h, X + h * k3)
        Xn = X + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        t = grid.t1 - (k + 1) * grid.h if back else grid.t0 + (k + 1) * grid.h
        if not np.all(np.isfinite(Xn)) or np.linalg.norm(Xn) > blowup_norm:
            escaped = True
            break
        X = Xn
        vals[kept] = X
        kept += 1
    if not escaped:
        k1 = np.asarray(field(t, X), dtype=float)
        if not np.all(np.isfinite(k1)):
            raise NonFiniteField(t)
        ders[kept - 1] = k1

    vals, ders = vals[:kept], ders[:kept]
    if back:
        vals, ders = vals[::-1].copy(), ders[::-1].copy()
        start = steps - kept + 1
        blow = start if escaped else None
    else:
        start = 0
        blow = kept - 1 if escaped else None
    return MatrixPath(grid, vals, ders, start=start, blowup=blow)


def matrix_exponential(M: np.ndarray) -> np.ndarray:
    """``e^M`` by scaling and squaring with Pade (scipy's expm).

    Raises
    ------
    Overflow
        If ``||M||_1`` exceeds the safe range or the result is not finite.
    """
    M = np.asarray(M, dtype=float)
    if not np.all(np.isfinite(M)):
        raise Overflow("matrix exponential of a non-finite matrix")
    if M.size and np.linalg.norm(M, 1) > EXPM_NORM_LIMIT:
        raise Overflow(f"||M||_1 = {np.linalg.norm(M, 1):.3g} exceeds {EXPM_NORM_LIMIT}")
    X = sla.expm(M)
    if not np.all(np.isfinite(X)):
        raise Overflow("matrix exponential overflowed")
    return X


def eigenvalues(M: np.ndarray) -> np.ndarray:
    """All eigenvalues (complex), via LAPACK Hessenberg-QR."""
    M = np.asarray(M, dtype=float)
    if not np.all(np.isfinite(M)):
        raise NoConvergence("eigenvalues of a non-finite matrix")
    try:
        return np.linalg.eigvals(M).astype(complex)
    except np.linalg.LinAlgError as exc:
        raise NoConvergence(str(exc)) from None


def spectral_abscissa(M: np.ndarray) -> float:
    M = np.asarray(M, dtype=float)
    return float(np.max(eigenvalues(M).real)) if M.size else -np.inf


def is_hurwitz(M: np.ndarray, margin: float = 0.0) -> bool:
    """True iff every eigenvalue has real part ``< -margin``."""
    return spectral_abscissa(M) < -margin


def solve_linear(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``A X = b`` by partial-pivot LU.

    Raises
    ------
    Singular
        If some pivot is below ``1e-14 * ||A||``.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"A must be square, got {A.shape}")
    scale = np.linalg.norm(A)
    if scale == 0.0 or not np.isfinite(scale):
        raise Singular("matrix is zero or non-finite")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", sla.LinAlgWarning)
        lu, piv = sla.lu_factor(A, check_finite=False)
    if np.min(np.abs(np.diag(lu))) < SINGULAR_PIVOT_RTOL * scale:
        raise Singular(f"pivot below {SINGULAR_PIVOT_RTOL:g} * ||A||")
    return sla.lu_solve((lu, piv), b, check_finite=False)


def stable_subspace(H: np.ndarray, k: int, shift: float = 0.0, gap: float = 1e-9):
    """Orthonormal basis of the invariant subspace for ``Re(lambda) < shift``.

    Returns ``(U, eigs)`` with ``U`` of shape ``(m, k)``. Raises
    :class:`NoConvergence` when the ordered Schur form does not put
    exactly ``k`` eigenvalues on the selected side, or some eigenvalue lies
    within ``gap`` of the dividing line.
    """
    H = np.asarray(H, dtype=float)
    try:
        T, Z, sdim = sla.schur(H, output="real", sort=lambda re, im: re < shift)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NoConvergence(str(exc)) from None
    eigs = eigenvalues(H)
    if np.min(np.abs(eigs.real - shift)) <= gap:
        raise NoConvergence("eigenvalue on the dividing line")
    if sdim != k:
        raise NoConvergence(f"found {sdim} eigenvalues left of Re={shift:g}, expected {k}")
    return Z[:, :k], eigs


def symmetrize(X: np.ndarray) -> np.ndarray:
    return 0.5 * (X + np.swapaxes(X, -1, -2))
