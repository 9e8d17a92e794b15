"""Problem data for the robust mean-field LQG social control problem.

Each of the N agents follows

    dx_i = (A x_i + B u_i + G x^(N) + f) dt + sigma dW_i

and pays

    1/2 E int ( |x_i - Gamma x^(N) - eta|_Q^2 + |u_i|_R1^2 - |f|_R2^2 ) dt
        + 1/2 E |x_i(T)|_H^2

(with an ``exp(-rho t)`` weight and no terminal term on an infinite horizon).
``f`` is the common adversarial drift.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np

from .errors import (
    BadHorizon,
    DimensionMismatch,
    NotPositiveDefinite,
    NotPositiveSemidefinite,
    NotSymmetric,
    ParseError,
    SchemaViolation,
)

SYMMETRY_TOL = 1e-12
PSD_MARGIN = 1e-10
DEFAULT_SIGMA_SCALE = 0.1


@dataclass(frozen=True)
class Horizon:
    kind: str  # "finite" | "infinite"
    T: float | None = None
    rho: float | None = None

    @property
    def finite(self) -> bool:
        return self.kind == "finite"

    @classmethod
    def finite_horizon(cls, T: float) -> Horizon:
        return cls("finite", T=float(T))

    @classmethod
    def infinite_horizon(cls, rho: float = 0.0) -> Horizon:
        return cls("infinite", rho=float(rho))

    def to_json(self) -> dict[str, Any]:
        if self.finite:
            return {"type": "finite", "T": self.T}
        return {"type": "infinite", "rho": self.rho}


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Raw problem data; nothing is checked until :func:`validate_params`."""

    n: int
    r: int
    d: int
    A: np.ndarray
    B: np.ndarray
    G: np.ndarray
    sigma: np.ndarray
    Q: np.ndarray
    R1: np.ndarray
    R2: np.ndarray
    H: np.ndarray
    Gamma: np.ndarray
    eta: np.ndarray
    horizon: Horizon
    xbar0: np.ndarray
    init_spread: float = 0.0

    @property
    def rho(self) -> float:
        return 0.0 if self.horizon.finite else float(self.horizon.rho)

    @property
    def T(self) -> float:
        if not self.horizon.finite:
            raise BadHorizon("infinite-horizon model has no terminal time")
        return float(self.horizon.T)

    def replace(self, **changes: Any) -> ModelParams:
        """Copy with some fields changed (result is unvalidated)."""
        values = {f.name: getattr(self, f.name) for f in fields(ModelParams)}
        values.update(changes)
        return ModelParams(**values)


@dataclass(frozen=True, eq=False)
class ValidatedModel(ModelParams):
    """A :class:`ModelParams` that passed every invariant check.

    Also caches the inverses and products used all over the synthesis.
    """

    R1inv: np.ndarray = field(default=None, repr=False)
    R2inv: np.ndarray = field(default=None, repr=False)
    S: np.ndarray = field(default=None, repr=False)  # B R1^-1 B^T

    def replace(self, **changes: Any) -> ValidatedModel:
        values = {f.name: getattr(self, f.name) for f in fields(ModelParams)}
        values.update(changes)
        return validate_params(ModelParams(**values))


@dataclass(frozen=True, eq=False)
class DerivedWeights:
    Psi: np.ndarray
    eta_bar: np.ndarray
    QIG: np.ndarray


def _as_matrix(name: str, value: Any, shape: tuple[int, int]) -> np.ndarray:
    arr = np.array(value, dtype=float)
    if arr.ndim == 0 and shape == (1, 1):
        arr = arr.reshape(1, 1)
    if arr.shape != shape:
        raise DimensionMismatch(f"{name} has shape {arr.shape}, expected {shape}")
    return arr


def _as_vector(name: str, value: Any, size: int) -> np.ndarray:
    arr = np.array(value, dtype=float).reshape(-1)
    if arr.shape != (size,):
        raise DimensionMismatch(f"{name} has length {arr.size}, expected {size}")
    return arr


def _check_symmetric(name: str, X: np.ndarray) -> None:
    gap = float(np.max(np.abs(X - X.T))) if X.size else 0.0
    if gap > SYMMETRY_TOL:
        raise NotSymmetric(name, gap)


def _min_eig(X: np.ndarray) -> float:
    return float(np.min(np.linalg.eigvalsh(0.5 * (X + X.T))))


def validate_params(raw: ModelParams) -> ValidatedModel:
    """Check dimensions, symmetry, definiteness and the horizon.

    Raises
    ------
    DimensionMismatch, NotSymmetric, NotPositiveSemidefinite,
    NotPositiveDefinite, BadHorizon
    """
    n, r, d = int(raw.n), int(raw.r), int(raw.d)
    if n < 1 or r < 1 or d < 1:
        raise DimensionMismatch(f"dimensions must be positive, got n={n}, r={r}, d={d}")
    A = _as_matrix("A", raw.A, (n, n))
    B = _as_matrix("B", raw.B, (n, r))
    G = _as_matrix("G", raw.G, (n, n))
    sigma = _as_matrix("sigma", raw.sigma, (n, d))
    Q = _as_matrix("Q", raw.Q, (n, n))
    R1 = _as_matrix("R1", raw.R1, (r, r))
    R2 = _as_matrix("R2", raw.R2, (n, n))
    H = _as_matrix("H", raw.H, (n, n))
    Gamma = _as_matrix("Gamma", raw.Gamma, (n, n))
    eta = _as_vector("eta", raw.eta, n)
    xbar0 = _as_vector("xbar0", raw.xbar0, n)

    for name, X in (("A", A), ("B", B), ("G", G), ("sigma", sigma), ("Q", Q),
                    ("R1", R1), ("R2", R2), ("H", H), ("Gamma", Gamma),
                    ("eta", eta), ("xbar0", xbar0)):
        if not np.all(np.isfinite(X)):
            raise DimensionMismatch(f"{name} has non-finite entries")

    for name, X in (("Q", Q), ("R1", R1), ("R2", R2), ("H", H)):
        _check_symmetric(name, X)
    for name, X in (("Q", Q), ("H", H)):
        lam = _min_eig(X)
        if lam < -PSD_MARGIN:
            raise NotPositiveSemidefinite(name, lam)
    for name, X in (("R1", R1), ("R2", R2)):
        lam = _min_eig(X)
        if lam <= PSD_MARGIN:
            raise NotPositiveDefinite(name, lam)

    hz = raw.horizon
    if hz.kind == "finite":
        if hz.T is None or not np.isfinite(hz.T) or hz.T <= 0:
            raise BadHorizon(f"finite horizon needs T > 0, got {hz.T}")
    elif hz.kind == "infinite":
        if hz.rho is None or not np.isfinite(hz.rho) or hz.rho < 0:
            raise BadHorizon(f"infinite horizon needs rho >= 0, got {hz.rho}")
    else:
        raise BadHorizon(f"unknown horizon type {hz.kind!r}")

    spread = float(raw.init_spread)
    if not np.isfinite(spread) or spread < 0:
        raise BadHorizon(f"init_spread must be a nonnegative number, got {spread}")

    R1inv = np.linalg.inv(R1)
    R2inv = np.linalg.inv(R2)
    R1inv = 0.5 * (R1inv + R1inv.T)
    R2inv = 0.5 * (R2inv + R2inv.T)
    S = B @ R1inv @ B.T
    return ValidatedModel(
        n=n, r=r, d=d, A=A, B=B, G=G, sigma=sigma, Q=Q, R1=R1, R2=R2, H=H,
        Gamma=Gamma, eta=eta, horizon=hz, xbar0=xbar0, init_spread=spread,
        R1inv=R1inv, R2inv=R2inv, S=0.5 * (S + S.T),
    )


def derived_weights(m: ModelParams) -> DerivedWeights:
    """Weights of the stacked reformulation.

    ``Psi = Gamma^T Q + Q Gamma - Gamma^T Q Gamma``,
    ``eta_bar = Q eta - Gamma^T Q eta`` and ``QIG = (I - Gamma)^T Q (I - Gamma)``,
    so that ``Q - Psi == QIG``.
    """
    Q, Gm, eta = m.Q, m.Gamma, m.eta
    Psi = Gm.T @ Q + Q @ Gm - Gm.T @ Q @ Gm
    Psi = 0.5 * (Psi + Psi.T)
    I = np.eye(m.n)
    QIG = (I - Gm).T @ Q @ (I - Gm)
    QIG = 0.5 * (QIG + QIG.T)
    return DerivedWeights(Psi=Psi, eta_bar=Q @ eta - Gm.T @ Q @ eta, QIG=QIG)


# -- scenario files -----------------------------------------------------------

_REQUIRED = ("n", "r", "A", "B", "G", "Q", "R1", "R2", "Gamma", "horizon")


def params_from_dict(data: dict[str, Any]) -> ModelParams:
    """Build :class:`ModelParams` from a decoded scenario object.

    Optional keys and their defaults: ``d`` = n, ``eta`` = 0,
    ``sigma`` = 0.1 * I (n x d), ``H`` = 0 (required on a finite horizon),
    ``xbar0`` = 0, ``init_spread`` = 0.
    """
    if not isinstance(data, dict):
        raise SchemaViolation("<root>", "scenario must be a JSON object")
    for key in _REQUIRED:
        if key not in data:
            raise SchemaViolation(key)

    def _int(key: str, default: int | None = None) -> int:
        value = data.get(key, default)
        if isinstance(value, bool) or not isinstance(value, int) or value < 1:
            raise SchemaViolation(key, "expected a positive integer")
        return value

    n = _int("n")
    r = _int("r")
    d = _int("d", n)

    hz = data["horizon"]
    if not isinstance(hz, dict) or "type" not in hz:
        raise SchemaViolation("horizon", "expected {type: finite|infinite, ...}")
    try:
        if hz["type"] == "finite":
            horizon = Horizon.finite_horizon(float(hz["T"]))
        elif hz["type"] == "infinite":
            horizon = Horizon.infinite_horizon(float(hz.get("rho", 0.0)))
        else:
            raise SchemaViolation("horizon", f"unknown type {hz['type']!r}")
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaViolation("horizon", str(exc)) from None
    if horizon.finite and "H" not in data:
        raise SchemaViolation("H", "required on a finite horizon")

    def _arr(key: str, default: Any) -> np.ndarray:
        value = data.get(key, default)
        try:
            return np.array(value, dtype=float)
        except (TypeError, ValueError):
            raise SchemaViolation(key, "expected numbers") from None

    sigma_default = DEFAULT_SIGMA_SCALE * np.eye(n, d)
    try:
        spread = float(data.get("init_spread", 0.0))
    except (TypeError, ValueError):
        raise SchemaViolation("init_spread", "expected a number") from None
    return ModelParams(
        n=n, r=r, d=d,
        A=_arr("A", None), B=_arr("B", None), G=_arr("G", None),
        sigma=_arr("sigma", sigma_default),
        Q=_arr("Q", None), R1=_arr("R1", None), R2=_arr("R2", None),
        H=_arr("H", np.zeros((n, n))), Gamma=_arr("Gamma", None),
        eta=_arr("eta", np.zeros(n)), horizon=horizon,
        xbar0=_arr("xbar0", np.zeros(n)), init_spread=spread,
    )


def params_to_dict(m: ModelParams) -> dict[str, Any]:
    return {
        "n": int(m.n), "r": int(m.r), "d": int(m.d),
        "A": np.asarray(m.A).tolist(), "B": np.asarray(m.B).tolist(),
        "G": np.asarray(m.G).tolist(), "sigma": np.asarray(m.sigma).tolist(),
        "Q": np.asarray(m.Q).tolist(), "R1": np.asarray(m.R1).tolist(),
        "R2": np.asarray(m.R2).tolist(), "H": np.asarray(m.H).tolist(),
        "Gamma": np.asarray(m.Gamma).tolist(), "eta": np.asarray(m.eta).tolist(),
        "horizon": m.horizon.to_json(), "xbar0": np.asarray(m.xbar0).tolist(),
        "init_spread": float(m.init_spread),
    }


def dump_scenario(m: ModelParams, path: str | Path | None = None) -> str:
    """Serialize to scenario JSON; Python float repr round-trips exactly."""
    text = json.dumps(params_to_dict(m), indent=2)
    if path is not None:
        Path(path).write_text(text + "\n")
    return text


def load_scenario(path: str | Path) -> ModelParams:
    """Read a scenario JSON file.

    Raises :class:`ParseError` (with line number) on malformed JSON and
    :class:`SchemaViolation` on missing or ill-typed fields.
    """
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ParseError(f"cannot read scenario {path}: {exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line=exc.lineno) from None
    return params_from_dict(data)


def shipped_scenario(name: str) -> Path:
    """Path of a scenario bundled with the package (``paper_example`` etc.)."""
    if not name.endswith(".json"):
        name += ".json"
    ref = resources.files("robust_mflqg") / "scenarios" / name
    return Path(str(ref))


def shipped_scenarios() -> list[str]:
    folder = resources.files("robust_mflqg") / "scenarios"
    return sorted(p.name for p in folder.iterdir() if p.name.endswith(".json"))
