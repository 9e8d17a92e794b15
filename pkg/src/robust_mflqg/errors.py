"""Exception hierarchy.

Every failure mode a caller may want to branch on has its own class; the
``time`` attributes use the forward clock of the problem (``t`` in ``[0, T]``).
"""

from __future__ import annotations


class MFLQGError(Exception):
    """Base class for all package errors."""


# -- model validation -------------------------------------------------------


class ValidationError(MFLQGError, ValueError):
    pass


class DimensionMismatch(ValidationError):
    pass


class NotSymmetric(ValidationError):
    def __init__(self, name: str, gap: float):
        super().__init__(f"{name} is not symmetric (max |X - X^T| = {gap:.3e})")
        self.name = name


class NotPositiveSemidefinite(ValidationError):
    def __init__(self, name: str, min_eig: float):
        super().__init__(f"{name} is not positive semidefinite (min eig = {min_eig:.3e})")
        self.name = name


class NotPositiveDefinite(ValidationError):
    def __init__(self, name: str, min_eig: float):
        super().__init__(f"{name} is not positive definite (min eig = {min_eig:.3e})")
        self.name = name


class BadHorizon(ValidationError):
    pass


class ParseError(ValidationError):
    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(message + suffix)
        self.line = line
        self.field = field


class SchemaViolation(ValidationError):
    def __init__(self, field: str, reason: str = "missing or malformed"):
        super().__init__(f"scenario field {field!r}: {reason}")
        self.field = field


# -- numerics ---------------------------------------------------------------


class NumericsError(MFLQGError, ArithmeticError):
    pass


class NonFiniteField(NumericsError):
    def __init__(self, t: float):
        super().__init__(f"vector field is non-finite at t={t:.6g}")
        self.time = t


class Overflow(NumericsError):
    pass


class NoConvergence(NumericsError):
    pass


class Singular(NumericsError):
    pass


# -- Riccati / consistency --------------------------------------------------


class BlowUp(NumericsError):
    """Finite-time escape of a Riccati solution.

    ``time`` is the last grid node kept before the escape and ``path`` the
    partial :class:`~robust_mflqg.numerics.MatrixPath`.
    """

    def __init__(self, what: str, time: float, path=None):
        super().__init__(f"{what} blows up near t={time:.6g}")
        self.what = what
        self.time = time
        self.path = path


class YBlowUp(BlowUp):
    pass


class NoStabilizingSolution(NumericsError):
    pass


class NoAdmissibleSolution(NumericsError):
    pass


class NoAdmissibleY(NoAdmissibleSolution):
    pass


class NewtonDivergence(NumericsError):
    pass


class SingularBoundaryMap(Singular):
    pass


# -- control / oracle -------------------------------------------------------


class GridMismatch(MFLQGError, ValueError):
    pass


class MissingPtilde(MFLQGError, ValueError):
    pass


class UnstableSimulation(NumericsError):
    pass


class NotConcave(NumericsError):
    pass


class TooLarge(MFLQGError, ValueError):
    pass
