"""Linear-quadratic problem definitions and assumption checks."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

CTRB_RTOL = 1e-10
PSD_ATOL = 1e-12


class DimensionError(ValueError):
    """Matrices of a problem do not have consistent shapes."""


class CostKind(str, enum.Enum):
    LQG = "LQG"
    LEQG = "LEQG"


def _frozen(M, name: str, ndim: int = 2) -> np.ndarray:
    arr = np.array(M, dtype=np.float64)
    if ndim == 2 and arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.ndim != ndim:
        raise DimensionError(f"{name} must be a {ndim}-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    arr.setflags(write=False)
    return arr


def sym(M: np.ndarray) -> np.ndarray:
    """Symmetric part of the trailing two axes."""
    return 0.5 * (M + np.swapaxes(M, -1, -2))


@dataclass(frozen=True)
class LinearDynamics:
    """dX = (AX + BU) dt + sigma dW."""

    A: np.ndarray
    B: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        A = _frozen(self.A, "A")
        B = _frozen(self.B, "B")
        sigma = _frozen(self.sigma, "sigma")
        d = A.shape[0]
        if A.shape != (d, d):
            raise DimensionError(f"A must be square, got {A.shape}")
        if B.shape[0] != d:
            raise DimensionError(f"B must have {d} rows, got {B.shape}")
        if sigma.shape[0] != d:
            raise DimensionError(f"sigma must have {d} rows, got {sigma.shape}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "sigma", sigma)

    @property
    def d(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def q(self) -> int:
        return self.sigma.shape[1]

    @property
    def Sigma(self) -> np.ndarray:
        return sym(self.sigma @ self.sigma.T)


@dataclass(frozen=True)
class CostModel:
    """Running cost 0.5|Cx|^2 + 0.5|a|_R^2, terminal cost 0.5|x|_G^2.

    ``theta`` is the LEQG risk parameter and must be given iff ``kind`` is LEQG.
    """

    C: np.ndarray
    R: np.ndarray
    G: np.ndarray
    kind: CostKind = CostKind.LQG
    theta: Optional[float] = None

    def __post_init__(self):
        C = _frozen(self.C, "C")
        R = _frozen(self.R, "R")
        G = _frozen(self.G, "G")
        if R.shape[0] != R.shape[1]:
            raise DimensionError(f"R must be square, got {R.shape}")
        if G.shape[0] != G.shape[1]:
            raise DimensionError(f"G must be square, got {G.shape}")
        kind = CostKind(self.kind)
        theta = self.theta
        if kind is CostKind.LEQG:
            if theta is None or float(theta) == 0.0 or not np.isfinite(theta):
                raise ValueError("LEQG cost requires a finite nonzero theta")
            theta = float(theta)
        elif theta is not None:
            raise ValueError("theta is only meaningful for LEQG costs")
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "theta", theta)

    @property
    def Q(self) -> np.ndarray:
        return sym(self.C.T @ self.C)

    @property
    def abs_theta(self) -> float:
        """|theta| for LEQG, 1 for LQG (the scale relating S and P)."""
        return abs(self.theta) if self.kind is CostKind.LEQG else 1.0

    def running(self, x: np.ndarray, a: np.ndarray) -> np.ndarray:
        """c(x, a) evaluated along the last axis."""
        Cx = x @ self.C.T
        return 0.5 * np.sum(Cx * Cx, axis=-1) + 0.5 * np.sum((a @ self.R) * a, axis=-1)

    def terminal(self, x: np.ndarray) -> np.ndarray:
        return 0.5 * np.sum((x @ self.G) * x, axis=-1)


@dataclass(frozen=True)
class LqProblem:
    """Dynamics plus cost plus horizon.

    ``T`` is the finite horizon in seconds; ``None`` selects the average-cost
    problem (the limit T -> infinity).
    """

    dynamics: LinearDynamics
    cost: CostModel
    T: Optional[float] = None

    def __post_init__(self):
        d, m = self.dynamics.d, self.dynamics.m
        c = self.cost
        if c.C.shape[1] != d:
            raise DimensionError(f"C must have {d} columns, got {c.C.shape}")
        if c.R.shape != (m, m):
            raise DimensionError(f"R must be {m}x{m}, got {c.R.shape}")
        if c.G.shape != (d, d):
            raise DimensionError(f"G must be {d}x{d}, got {c.G.shape}")
        if self.T is not None:
            if not self.T > 0:
                raise ValueError("horizon T must be positive")
            object.__setattr__(self, "T", float(self.T))

    @classmethod
    def from_matrices(cls, A, B, sigma, C, R, G, kind="LQG", theta=None, T=None) -> "LqProblem":
        return cls(LinearDynamics(A, B, sigma), CostModel(C, R, G, CostKind(kind), theta), T)

    @property
    def d(self) -> int:
        return self.dynamics.d

    @property
    def m(self) -> int:
        return self.dynamics.m

    @property
    def kind(self) -> CostKind:
        return self.cost.kind

    @property
    def is_average(self) -> bool:
        return self.T is None

    def with_cost(self, kind, theta=None) -> "LqProblem":
        c = self.cost
        return LqProblem(self.dynamics, CostModel(c.C, c.R, c.G, CostKind(kind), theta), self.T)

    def with_horizon(self, T: Optional[float]) -> "LqProblem":
        return LqProblem(self.dynamics, self.cost, T)

    def label(self) -> str:
        if self.kind is CostKind.LQG:
            return "LQG"
        return f"LEQG(theta={self.cost.theta:g})"


def effective_matrices(problem: LqProblem) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(D, Sigma)`` with D = B R^-1 B^T and Sigma = sigma sigma^T."""
    B = problem.dynamics.B
    D = sym(B @ np.linalg.solve(problem.cost.R, B.T))
    return D, problem.dynamics.Sigma


# --------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    margin: float
    detail: str = ""
    severity: str = "error"  # "warning" checks never fail the report


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple[Check, ...] = field(default_factory=tuple)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks if c.severity == "error")

    def failures(self) -> list[Check]:
        return [c for c in self.checks if c.severity == "error" and not c.passed]

    def warnings(self) -> list[Check]:
        return [c for c in self.checks if c.severity == "warning" and not c.passed]

    def __getitem__(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def summary(self) -> str:
        lines = []
        for c in self.checks:
            tag = "ok" if c.passed else ("WARN" if c.severity == "warning" else "FAIL")
            lines.append(f"[{tag:4}] {c.name}: margin={c.margin:.3e} {c.detail}".rstrip())
        return "\n".join(lines)


def krylov_rank(A: np.ndarray, B: np.ndarray, rtol: float = CTRB_RTOL) -> tuple[int, float]:
    """Rank of the controllability matrix [B, AB, ..., A^{d-1}B].

    Built as an orthonormal block-Krylov staircase so that powers of A do not
    swamp the SVD. Returns ``(rank, margin)`` where margin is the smallest
    relative singular value that was retained (0 if B = 0).
    """
    d = A.shape[0]
    bnorm = np.linalg.norm(B, 2)
    if bnorm == 0.0:
        return 0, 0.0
    An = A / max(np.linalg.norm(A, 2), 1e-300)
    basis = np.zeros((d, 0))
    block = B / bnorm
    margin = np.inf
    while basis.shape[1] < d and block.shape[1] > 0:
        for _ in range(2):  # re-orthogonalise
            block = block - basis @ (basis.T @ block)
        U, s, _ = np.linalg.svd(block, full_matrices=False)
        keep = s > rtol
        if not np.any(keep):
            break
        margin = min(margin, float(s[keep].min()))
        basis = np.hstack([basis, U[:, keep]])
        block = An @ U[:, keep]
    return basis.shape[1], margin


def _pd_check(name: str, M: np.ndarray, label: str) -> Check:
    if not np.allclose(M, M.T, rtol=1e-12, atol=1e-12 * max(1.0, np.abs(M).max())):
        return Check(name, False, float("nan"), f"{label} is not symmetric")
    lam = float(np.linalg.eigvalsh(sym(M))[0])
    try:
        np.linalg.cholesky(sym(M))
        ok = lam > 0
    except np.linalg.LinAlgError:
        ok = False
    return Check(name, ok, lam, f"{label} {'is' if ok else 'is not'} positive definite")


def validate(problem: LqProblem) -> ValidationReport:
    """Check the standing assumptions (controllability, cost positivity, LEQG feasibility).

    Observability of (A, C) is reported as a warning only.
    """
    dyn, cost = problem.dynamics, problem.cost
    checks = []

    rank, margin = krylov_rank(dyn.A, dyn.B)
    checks.append(Check("controllability", rank == dyn.d, margin,
                        f"rank {rank} of {dyn.d} for (A, B)"))
    checks.append(_pd_check("state_cost_pd", cost.Q, "C^T C"))
    checks.append(_pd_check("control_cost_pd", cost.R, "R"))
    checks.append(_pd_check("terminal_cost_pd", cost.G, "G"))

    if cost.kind is CostKind.LEQG:
        D, Sigma = effective_matrices(problem)
        M = sym(D - cost.theta * Sigma)
        lam = float(np.linalg.eigvalsh(M)[0])
        tol = PSD_ATOL * max(1.0, np.abs(M).max())
        r, _ = krylov_rank(dyn.A, M)
        ok = lam >= -tol and r == dyn.d
        if lam > tol:
            detail = "D - theta*Sigma is positive definite"
        elif ok:
            detail = "D - theta*Sigma is semidefinite and (A, D - theta*Sigma) is controllable"
        elif lam < -tol:
            detail = "D - theta*Sigma is indefinite"
        else:
            detail = f"(A, D - theta*Sigma) has rank {r} of {dyn.d}"
        checks.append(Check("risk_feasibility", ok, lam, detail))

    orank, omargin = krylov_rank(dyn.A.T, cost.C.T)
    checks.append(Check("observability", orank == dyn.d, omargin,
                        f"rank {orank} of {dyn.d} for (A, C)", severity="warning"))
    return ValidationReport(tuple(checks))


class AssumptionError(ValueError):
    def __init__(self, report: ValidationReport):
        self.report = report
        names = ", ".join(c.name for c in report.failures())
        super().__init__(f"problem violates standing assumptions: {names}")


def require_valid(problem: LqProblem) -> ValidationReport:
    report = validate(problem)
    if not report.passed:
        raise AssumptionError(report)
    return report
